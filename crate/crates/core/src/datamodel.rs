//! Meme and rationale records, their line-delimited JSON formats, top-k
//! relation selection and deterministic batching.
//!
//! `dataset.jsonl` starts with a manifest line
//! `{"schema":"m3hop/1","d_t":N,"d_v":N}` followed by one meme per line.
//! `rationales.jsonl` holds one `{meme_id, hop, text, tokens}` object per line.
//! Embedding values are stored as 32-bit floats.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DATASET_SCHEMA: &str = "m3hop/1";

/// A scored `(subject, relation, object)` triple from the scene graph.
/// Serialized as `[subject, relation, object, score]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "(String, String, String, f64)", from = "(String, String, String, f64)")]
pub struct EorTriplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub score: f64,
}

impl EorTriplet {
    pub fn new(subject: &str, relation: &str, object: &str, score: f64) -> Self {
        Self {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
            score,
        }
    }

    /// `subject relation object`
    pub fn phrase(&self) -> String {
        format!("{} {} {}", self.subject, self.relation, self.object)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.subject.is_empty() || self.relation.is_empty() || self.object.is_empty() {
            return Err(format!("triplet {:?} has an empty field", self.phrase()));
        }
        if !self.score.is_finite() || !(0.0..=1.0).contains(&self.score) {
            return Err(format!("triplet {:?} has score {} outside [0, 1]", self.phrase(), self.score));
        }
        Ok(())
    }
}

impl From<(String, String, String, f64)> for EorTriplet {
    fn from((subject, relation, object, score): (String, String, String, f64)) -> Self {
        Self {
            subject,
            relation,
            object,
            score,
        }
    }
}

impl From<EorTriplet> for (String, String, String, f64) {
    fn from(t: EorTriplet) -> Self {
        (t.subject, t.relation, t.object, t.score)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train, dev or test)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One of the three reasoning hops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Hop {
    #[serde(rename = "E")]
    Emotion,
    #[serde(rename = "T")]
    Target,
    #[serde(rename = "C")]
    Context,
}

impl Hop {
    pub const ALL: [Hop; 3] = [Hop::Emotion, Hop::Target, Hop::Context];

    pub fn tag(self) -> &'static str {
        match self {
            Hop::Emotion => "E",
            Hop::Target => "T",
            Hop::Context => "C",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Hop::Emotion => 0,
            Hop::Target => 1,
            Hop::Context => 2,
        }
    }
}

impl fmt::Display for Hop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemeRecord {
    pub id: String,
    pub split: Split,
    pub text: String,
    /// 1 = misogynous, 0 = not.
    pub label: u8,
    pub eors: Vec<EorTriplet>,
    pub ft: Option<Vec<f64>>,
    pub fv: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn of(records: &[MemeRecord]) -> Self {
        let mut c = SplitCounts::default();
        for r in records {
            match r.split {
                Split::Train => c.train += 1,
                Split::Dev => c.dev += 1,
                Split::Test => c.test += 1,
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    pub d_t: usize,
    pub d_v: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<SplitCounts>,
}

impl DatasetManifest {
    pub fn new(d_t: usize, d_v: usize) -> Self {
        Self {
            schema: DATASET_SCHEMA.into(),
            d_t,
            d_v,
            counts: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RationaleRecord {
    pub meme_id: String,
    pub hop: Hop,
    pub text: String,
    /// Per-token embeddings, `L × d_t`; empty until an encoder fills them.
    #[serde(default)]
    pub tokens: Vec<Vec<f64>>,
}

impl RationaleRecord {
    pub fn token_matrix(&self) -> Option<Tensor> {
        if self.tokens.is_empty() {
            None
        } else {
            Tensor::from_rows(&self.tokens).ok()
        }
    }
}

/// Rationales indexed by `(meme_id, hop)`.
#[derive(Clone, Debug, Default)]
pub struct RationaleSet {
    entries: BTreeMap<(String, Hop), RationaleRecord>,
}

impl RationaleSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = RationaleRecord>) -> Result<Self> {
        let mut set = Self::new();
        for r in records {
            set.insert(r)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, record: RationaleRecord) -> Result<()> {
        let key = (record.meme_id.clone(), record.hop);
        if self.entries.contains_key(&key) {
            return Err(Error::Integrity(format!(
                "duplicate rationale for meme {} hop {}",
                record.meme_id, record.hop
            )));
        }
        self.entries.insert(key, record);
        Ok(())
    }

    pub fn get(&self, meme_id: &str, hop: Hop) -> Option<&RationaleRecord> {
        self.entries.get(&(meme_id.to_string(), hop))
    }

    /// Records sorted by `(meme_id, hop)`.
    pub fn records(&self) -> impl Iterator<Item = &RationaleRecord> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct RawMeme {
    id: String,
    split: Split,
    text: String,
    label: i64,
    #[serde(default)]
    eors: Vec<EorTriplet>,
    #[serde(default)]
    ft: Option<Vec<f32>>,
    #[serde(default)]
    fv: Option<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
struct RawRationale {
    meme_id: String,
    hop: Hop,
    text: String,
    #[serde(default)]
    tokens: Vec<Vec<f32>>,
}

fn widen(v: Option<Vec<f32>>) -> Option<Vec<f64>> {
    v.map(|xs| xs.into_iter().map(f64::from).collect())
}

fn narrow(v: &Option<Vec<f64>>) -> Option<Vec<f32>> {
    v.as_ref().map(|xs| xs.iter().map(|&x| x as f32).collect())
}

/// Round-trip a value through the on-disk 32-bit representation.
pub fn quantize(x: f64) -> f64 {
    f64::from(x as f32)
}

fn parse_err(path: &Path, line: usize, message: impl fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<MemeRecord>)> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = content.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| parse_err(path, 1, "missing manifest line"))?;
    let manifest: DatasetManifest =
        serde_json::from_str(first).map_err(|e| parse_err(path, 1, format!("manifest: {e}")))?;
    if manifest.schema != DATASET_SCHEMA {
        return Err(Error::Version(format!(
            "dataset schema `{}` is not supported (expected `{DATASET_SCHEMA}`)",
            manifest.schema
        )));
    }
    if manifest.d_t == 0 || manifest.d_v == 0 {
        return Err(Error::Schema("manifest d_t and d_v must be positive".into()));
    }

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (idx, line) in lines {
        let raw: RawMeme = serde_json::from_str(line).map_err(|e| parse_err(path, idx + 1, e))?;
        if !seen.insert(raw.id.clone()) {
            return Err(Error::Integrity(format!("duplicate meme id `{}`", raw.id)));
        }
        let label = match raw.label {
            0 => 0,
            1 => 1,
            other => {
                return Err(Error::Integrity(format!(
                    "meme `{}` has label {other}, expected 0 or 1",
                    raw.id
                )))
            }
        };
        for t in &raw.eors {
            t.validate()
                .map_err(|m| Error::Integrity(format!("meme `{}`: {m}", raw.id)))?;
        }
        for (field, value, expected) in [("ft", &raw.ft, manifest.d_t), ("fv", &raw.fv, manifest.d_v)] {
            if let Some(v) = value {
                if v.len() != expected {
                    return Err(Error::Schema(format!(
                        "meme `{}` field {field}: expected length {expected}, got {}",
                        raw.id,
                        v.len()
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Schema(format!("meme `{}` field {field} has non-finite values", raw.id)));
                }
            }
        }
        records.push(MemeRecord {
            id: raw.id,
            split: raw.split,
            text: raw.text,
            label,
            eors: raw.eors,
            ft: widen(raw.ft),
            fv: widen(raw.fv),
        });
    }

    let counts = SplitCounts::of(&records);
    if let Some(declared) = manifest.counts {
        if declared != counts {
            return Err(Error::Integrity(format!(
                "manifest declares {declared:?} but file holds {counts:?}"
            )));
        }
    }
    Ok((
        DatasetManifest {
            counts: Some(counts),
            ..manifest
        },
        records,
    ))
}

/// Write a dataset; the manifest's split counts are recomputed from `records`.
pub fn write_dataset(path: impl AsRef<Path>, manifest: &DatasetManifest, records: &[MemeRecord]) -> Result<()> {
    let mut out = Vec::new();
    let manifest = DatasetManifest {
        schema: DATASET_SCHEMA.into(),
        counts: Some(SplitCounts::of(records)),
        ..manifest.clone()
    };
    writeln!(out, "{}", serde_json::to_string(&manifest).expect("manifest serializes")).unwrap();
    for r in records {
        let raw = RawMeme {
            id: r.id.clone(),
            split: r.split,
            text: r.text.clone(),
            label: i64::from(r.label),
            eors: r.eors.clone(),
            ft: narrow(&r.ft),
            fv: narrow(&r.fv),
        };
        writeln!(out, "{}", serde_json::to_string(&raw).expect("record serializes")).unwrap();
    }
    write_atomic(path.as_ref(), &out)
}

/// Load rationales; when `d_t` is given, non-empty token rows must have that width.
pub fn load_rationales(path: impl AsRef<Path>, d_t: Option<usize>) -> Result<RationaleSet> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut set = RationaleSet::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRationale = serde_json::from_str(line).map_err(|e| parse_err(path, idx + 1, e))?;
        if let Some(d) = d_t {
            if let Some(bad) = raw.tokens.iter().find(|row| row.len() != d) {
                return Err(Error::Schema(format!(
                    "rationale {}/{}: token row length {} != d_t {d}",
                    raw.meme_id,
                    raw.hop,
                    bad.len()
                )));
            }
        }
        set.insert(RationaleRecord {
            meme_id: raw.meme_id,
            hop: raw.hop,
            text: raw.text,
            tokens: raw
                .tokens
                .into_iter()
                .map(|row| row.into_iter().map(f64::from).collect())
                .collect(),
        })?;
    }
    Ok(set)
}

/// Write rationales sorted by `(meme_id, hop)`.
pub fn write_rationales<'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a RationaleRecord>,
) -> Result<()> {
    let mut sorted: Vec<&RationaleRecord> = records.into_iter().collect();
    sorted.sort_by(|a, b| (&a.meme_id, a.hop).cmp(&(&b.meme_id, b.hop)));
    let mut out = Vec::new();
    for r in sorted {
        let raw = RawRationale {
            meme_id: r.meme_id.clone(),
            hop: r.hop,
            text: r.text.clone(),
            tokens: r
                .tokens
                .iter()
                .map(|row| row.iter().map(|&x| x as f32).collect())
                .collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&raw).expect("rationale serializes")).unwrap();
    }
    write_atomic(path.as_ref(), &out)
}

/// Write to a sibling temp file, then rename over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// The `k` highest-scored triplets; ties go to the lexicographically smaller
/// `(subject, relation, object)`.
pub fn select_top_eor(eors: &[EorTriplet], k: usize) -> Vec<EorTriplet> {
    let mut sorted = eors.to_vec();
    sorted.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.subject.cmp(&b.subject))
            .then_with(|| a.relation.cmp(&b.relation))
            .then_with(|| a.object.cmp(&b.object))
    });
    sorted.truncate(k);
    sorted
}

/// Split `0..n` into batches of indices.
///
/// With `shuffle`, the order is a pure function of `(seed, n)`. A trailing
/// batch of one element is folded into the previous batch so every batch
/// has at least one contrastive negative.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch_size must be at least 2, got {batch_size}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    Ok(batches)
}
