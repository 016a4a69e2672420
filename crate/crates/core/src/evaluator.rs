//! Classification metrics, split prediction and the ablation grid.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datamodel::{MemeRecord, RationaleSet, Split};
use crate::encoder::FeatureProvider;
use crate::error::{Error, Result};
use crate::fusion::{classify, forward, ActiveStages, FusionConfig};
use crate::numerics::ParamStore;
use crate::trainer::{prepare_sample, train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    /// Indexed by label.
    pub per_class: [ClassScores; 2],
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    /// `confusion[gold][predicted]`.
    pub confusion: [[usize; 2]; 2],
    /// How `macro_precision` / `macro_recall` were averaged.
    pub averaging: String,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Binary metrics; any 0/0 ratio is 0.
pub fn compute_metrics(predictions: &[u8], golds: &[u8]) -> Result<MetricsReport> {
    if predictions.len() != golds.len() || golds.is_empty() {
        return Err(Error::Integrity(format!(
            "metrics need equal non-empty lengths, got {} predictions and {} golds",
            predictions.len(),
            golds.len()
        )));
    }
    if let Some(bad) = predictions.iter().chain(golds).find(|&&l| l > 1) {
        return Err(Error::Integrity(format!("label {bad} is not binary")));
    }
    let mut confusion = [[0usize; 2]; 2];
    for (&p, &g) in predictions.iter().zip(golds) {
        confusion[g as usize][p as usize] += 1;
    }
    let class = |c: usize| {
        let tp = confusion[c][c];
        let predicted = confusion[0][c] + confusion[1][c];
        let support = confusion[c][0] + confusion[c][1];
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        ClassScores {
            precision,
            recall,
            f1: f1(precision, recall),
            support,
        }
    };
    let per_class = [class(0), class(1)];
    let n = golds.len();
    Ok(MetricsReport {
        n,
        macro_precision: (per_class[0].precision + per_class[1].precision) / 2.0,
        macro_recall: (per_class[0].recall + per_class[1].recall) / 2.0,
        macro_f1: (per_class[0].f1 + per_class[1].f1) / 2.0,
        weighted_f1: (per_class[0].f1 * per_class[0].support as f64 + per_class[1].f1 * per_class[1].support as f64)
            / n as f64,
        accuracy: ratio(confusion[0][0] + confusion[1][1], n),
        per_class,
        confusion,
        averaging: "macro".into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: u8,
    pub gold: u8,
    pub p_misogynous: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub id: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitPredictions {
    /// In input order, skipping failed samples.
    pub predictions: Vec<Prediction>,
    pub errors: Vec<SampleError>,
}

impl SplitPredictions {
    pub fn labels(&self) -> Vec<u8> {
        self.predictions.iter().map(|p| p.label).collect()
    }

    pub fn golds(&self) -> Vec<u8> {
        self.predictions.iter().map(|p| p.gold).collect()
    }

    /// `None` when nothing was predicted.
    pub fn metrics(&self) -> Result<Option<MetricsReport>> {
        if self.predictions.is_empty() {
            return Ok(None);
        }
        compute_metrics(&self.labels(), &self.golds()).map(Some)
    }
}

/// Classify each record; a record that cannot be resolved is reported in
/// `errors` and left out of `predictions`.
pub fn predict_split(
    params: &ParamStore,
    cfg: &FusionConfig,
    stages: ActiveStages,
    records: &[&MemeRecord],
    rationales: &RationaleSet,
    provider: &FeatureProvider,
) -> Result<SplitPredictions> {
    if provider.d_t != cfg.d_t || provider.d_v != cfg.d_v {
        return Err(Error::Config(format!(
            "feature dims {}x{} do not match checkpoint dims {}x{}",
            provider.d_t, provider.d_v, cfg.d_t, cfg.d_v
        )));
    }
    cfg.check_params(params)?;
    let mut out = SplitPredictions::default();
    for record in records {
        let result = prepare_sample(record, rationales, provider, stages)
            .and_then(|s| forward(&s.features, params, cfg, stages));
        match result {
            Ok(trace) => out.predictions.push(Prediction {
                id: record.id.clone(),
                label: classify(&trace.probabilities),
                gold: record.label,
                p_misogynous: trace.probabilities.data()[1],
            }),
            Err(e) => out.errors.push(SampleError {
                id: record.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    Ok(out)
}

/// The ablation rows. `ClipMm` is the plain fused classifier without
/// rationales or alignment terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoEmotion,
    NoTarget,
    NoContext,
    NoSceneGraph,
    OnlyEmotion,
    OnlyTarget,
    OnlyContext,
    NoEmotionLoss,
    NoTargetLoss,
    NoContextLoss,
    ClipMm,
}

impl Variant {
    /// The grid selected by `all`.
    pub const GRID: [Variant; 11] = [
        Variant::Full,
        Variant::NoEmotion,
        Variant::NoTarget,
        Variant::NoContext,
        Variant::NoSceneGraph,
        Variant::OnlyEmotion,
        Variant::OnlyTarget,
        Variant::OnlyContext,
        Variant::NoEmotionLoss,
        Variant::NoTargetLoss,
        Variant::NoContextLoss,
    ];

    pub const ALL: [Variant; 12] = [
        Variant::Full,
        Variant::NoEmotion,
        Variant::NoTarget,
        Variant::NoContext,
        Variant::NoSceneGraph,
        Variant::OnlyEmotion,
        Variant::OnlyTarget,
        Variant::OnlyContext,
        Variant::NoEmotionLoss,
        Variant::NoTargetLoss,
        Variant::NoContextLoss,
        Variant::ClipMm,
    ];

    /// Short name accepted on the command line.
    pub fn key(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEmotion => "-E",
            Variant::NoTarget => "-T",
            Variant::NoContext => "-C",
            Variant::NoSceneGraph => "-SG",
            Variant::OnlyEmotion => "E",
            Variant::OnlyTarget => "T",
            Variant::OnlyContext => "C",
            Variant::NoEmotionLoss => "-L_Em",
            Variant::NoTargetLoss => "-L_Ta",
            Variant::NoContextLoss => "-L_Co",
            Variant::ClipMm => "clip-mm",
        }
    }

    /// Row label in the text table.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "M3Hop-CoT",
            Variant::NoEmotion => "M3Hop-CoT^-E",
            Variant::NoTarget => "M3Hop-CoT^-T",
            Variant::NoContext => "M3Hop-CoT^-C",
            Variant::NoSceneGraph => "M3Hop-CoT^-SG",
            Variant::OnlyEmotion => "M3Hop-CoT^E",
            Variant::OnlyTarget => "M3Hop-CoT^T",
            Variant::OnlyContext => "M3Hop-CoT^C",
            Variant::NoEmotionLoss => "M3Hop-CoT^-L_Em",
            Variant::NoTargetLoss => "M3Hop-CoT^-L_Ta",
            Variant::NoContextLoss => "M3Hop-CoT^-L_Co",
            Variant::ClipMm => "CLIP_MM",
        }
    }

    /// The base config with this variant's overrides applied.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let a = &mut cfg.ablation;
        let w = &mut cfg.weights;
        match self {
            Variant::Full => {}
            Variant::NoEmotion => a.drop_e = true,
            Variant::NoTarget => a.drop_t = true,
            Variant::NoContext => a.drop_c = true,
            Variant::NoSceneGraph => a.drop_sg = true,
            Variant::OnlyEmotion => a.only_e = true,
            Variant::OnlyTarget => a.only_t = true,
            Variant::OnlyContext => a.only_c = true,
            Variant::NoEmotionLoss => w.beta = 0.0,
            Variant::NoTargetLoss => w.gamma = 0.0,
            Variant::NoContextLoss => w.theta = 0.0,
            Variant::ClipMm => {
                a.drop_e = true;
                a.drop_t = true;
                a.drop_c = true;
                w.beta = 0.0;
                w.gamma = 0.0;
                w.theta = 0.0;
                if w.alpha == 0.0 {
                    w.alpha = 1.0;
                }
            }
        }
        cfg
    }

    /// Parse a comma-separated list; `all` expands to the 11-row grid.
    pub fn parse_list(s: &str) -> Result<Vec<Variant>> {
        let mut out = Vec::new();
        for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            if item == "all" {
                out.extend(Variant::GRID);
            } else {
                out.push(item.parse()?);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("empty variant list".into()));
        }
        Ok(out)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s || v.label() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.key()).collect();
                Error::Config(format!("unknown variant `{s}`; valid: all, {}", names.join(", ")))
            })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub struct AblationData<'a> {
    pub records: &'a [MemeRecord],
    pub rationales: &'a RationaleSet,
    /// Rationales generated without the scene-graph block, used by `-SG`.
    pub sg_free_rationales: Option<&'a RationaleSet>,
    pub provider: FeatureProvider,
    /// Split the rows are scored on.
    pub eval_split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub key: String,
    pub best_epoch: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub eval_split: Split,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.key == v.key())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<18} {:>7} {:>7} {:>7} {:>7}", "Model", "P", "R", "M-F1", "W-F1").unwrap();
        for r in &self.rows {
            let m = &r.metrics;
            writeln!(
                s,
                "{:<18} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
                r.variant,
                100.0 * m.macro_precision,
                100.0 * m.macro_recall,
                100.0 * m.macro_f1,
                100.0 * m.weighted_f1
            )
            .unwrap();
        }
        s
    }
}

fn run_variant(variant: Variant, base: &TrainConfig, fusion: &FusionConfig, data: &AblationData) -> Result<AblationRow> {
    let cfg = variant.apply(base);
    let rationales = if cfg.ablation.drop_sg {
        data.sg_free_rationales.ok_or_else(|| {
            Error::DataCompleteness("variant -SG needs rationales generated without the scene graph".into())
        })?
    } else {
        data.rationales
    };
    let outcome = train(data.records, rationales, &data.provider, &cfg, fusion)?;
    let eval: Vec<&MemeRecord> = data.records.iter().filter(|r| r.split == data.eval_split).collect();
    let preds = predict_split(&outcome.best_params, fusion, cfg.ablation.stages(), &eval, rationales, &data.provider)?;
    if let Some(e) = preds.errors.first() {
        return Err(Error::DataCompleteness(format!("{}: meme {}: {}", variant.key(), e.id, e.error)));
    }
    let metrics = preds.metrics()?.ok_or_else(|| {
        Error::DataCompleteness(format!("split {} has no memes to score", data.eval_split))
    })?;
    Ok(AblationRow {
        variant: variant.label().into(),
        key: variant.key().into(),
        best_epoch: outcome.best_epoch,
        metrics,
    })
}

/// Train and score every variant with the shared seed and data. Variants
/// run on separate threads; rows keep the requested order.
pub fn run_ablation(
    base: &TrainConfig,
    fusion: &FusionConfig,
    variants: &[Variant],
    data: &AblationData,
) -> Result<AblationTable> {
    let results: Vec<Result<AblationRow>> = std::thread::scope(|s| {
        let handles: Vec<_> = variants
            .iter()
            .map(|&v| s.spawn(move || run_variant(v, base, fusion, data)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("variant thread panicked"))
            .collect()
    });
    Ok(AblationTable {
        eval_split: data.eval_split,
        seed: base.seed,
        rows: results.into_iter().collect::<Result<_>>()?,
    })
}
