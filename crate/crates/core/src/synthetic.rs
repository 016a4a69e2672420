//! A planted toy dataset for offline end-to-end runs.
//!
//! Each meme draws one bit per hop, and its label is the majority of the
//! three bits. The bit shows up only as a keyword in that hop's rationale;
//! meme text and relations are neutral filler. Any one hop therefore
//! predicts the label for three quarters of the memes, and all three
//! together predict it exactly.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cot::{build_chained_prompt, build_prompt, PromptHop, RationalizeOptions};
use crate::datamodel::{select_top_eor, DatasetManifest, EorTriplet, Hop, MemeRecord, RationaleRecord, RationaleSet, Split, SplitCounts};
use crate::error::Result;

const FILLER: [&str; 24] = [
    "picture", "caption", "people", "standing", "near", "large", "colour", "scene", "shows", "bright",
    "background", "small", "room", "street", "holding", "looking", "together", "there", "image", "words",
    "simple", "outside", "moment", "while",
];

const ENTITIES: [&str; 8] = ["person", "dog", "car", "table", "phone", "chair", "cup", "tree"];
const RELATIONS: [&str; 5] = ["on", "near", "holding", "behind", "with"];

/// `(keyword when the bit is 1, keyword when the bit is 0)` per hop.
pub const KEYWORDS: [(&str, &str); 3] = [("contempt", "cheerful"), ("women", "everyone"), ("stereotype", "harmless")];

#[derive(Clone, Debug)]
pub struct PlantedSpec {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Declared feature width in the manifest.
    pub dim: usize,
    pub fillers_per_rationale: usize,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            n_train: 64,
            n_dev: 128,
            n_test: 0,
            dim: 32,
            fillers_per_rationale: 3,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlantedData {
    pub manifest: DatasetManifest,
    pub records: Vec<MemeRecord>,
    /// Per-meme hop bits in E, T, C order.
    pub bits: Vec<[bool; 3]>,
    /// Rationale texts (no token matrices), keyed as the LLM would return them.
    pub rationales: RationaleSet,
    /// Prompt → completion map covering plain, chained and scene-graph-free prompts.
    pub mock_answers: BTreeMap<String, String>,
}

fn fillers(rng: &mut ChaCha8Rng, n: usize) -> Vec<&'static str> {
    (0..n).map(|_| *FILLER.choose(rng).expect("non-empty")).collect()
}

fn rationale_text(rng: &mut ChaCha8Rng, hop: Hop, bit: bool, n_fill: usize) -> String {
    let (on, off) = KEYWORDS[hop.index()];
    let mut words = fillers(rng, n_fill);
    let at = rng.gen_range(0..=words.len());
    words.insert(at, if bit { on } else { off });
    words.join(" ")
}

pub fn planted(spec: &PlantedSpec) -> Result<PlantedData> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let splits = std::iter::repeat_n(Split::Train, spec.n_train)
        .chain(std::iter::repeat_n(Split::Dev, spec.n_dev))
        .chain(std::iter::repeat_n(Split::Test, spec.n_test));
    let mut records = Vec::new();
    let mut bits = Vec::new();
    let mut texts = Vec::new();
    for (i, split) in splits.enumerate() {
        let b: [bool; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let label = u8::from(b.iter().filter(|x| **x).count() >= 2);
        let n_eor = rng.gen_range(0..=3);
        let eors = (0..n_eor)
            .map(|_| {
                EorTriplet::new(
                    ENTITIES.choose(&mut rng).unwrap(),
                    RELATIONS.choose(&mut rng).unwrap(),
                    ENTITIES.choose(&mut rng).unwrap(),
                    f64::from(rng.gen_range(1..=99u8)) / 100.0,
                )
            })
            .collect();
        let text = fillers(&mut rng, 5).join(" ");
        let hop_texts: [String; 3] = Hop::ALL.map(|h| rationale_text(&mut rng, h, b[h.index()], spec.fillers_per_rationale));
        records.push(MemeRecord {
            id: format!("syn-{i:04}"),
            split,
            text,
            label,
            eors,
            ft: None,
            fv: None,
        });
        bits.push(b);
        texts.push(hop_texts);
    }

    let hops = PromptHop::defaults();
    let top_k = RationalizeOptions::default().top_k;
    let mut rationales = RationaleSet::new();
    let mut mock_answers = BTreeMap::new();
    for (record, hop_texts) in records.iter().zip(&texts) {
        let eors = select_top_eor(&record.eors, top_k);
        for eor_view in [eors.as_slice(), &[]] {
            let mut prior: Vec<(Hop, &str)> = Vec::new();
            for (h, text) in hops.iter().zip(hop_texts) {
                mock_answers.insert(build_prompt(h, &record.text, eor_view), text.clone());
                mock_answers.insert(build_chained_prompt(h, &record.text, eor_view, &prior), text.clone());
                prior.push((h.hop(), text));
            }
        }
        for (h, text) in Hop::ALL.into_iter().zip(hop_texts) {
            rationales.insert(RationaleRecord {
                meme_id: record.id.clone(),
                hop: h,
                text: text.clone(),
                tokens: Vec::new(),
            })?;
        }
    }
    let mut manifest = DatasetManifest::new(spec.dim, spec.dim);
    manifest.counts = Some(SplitCounts::of(&records));
    Ok(PlantedData {
        manifest,
        records,
        bits,
        rationales,
        mock_answers,
    })
}
