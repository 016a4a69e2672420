//! One flat run configuration: defaults, then a JSON file, then overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::cot::{LlmEndpointConfig, RationalizeOptions, DEFAULT_MODEL};
use crate::encoder::{FeatureKind, FeatureProvider};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, ValueSource};
use crate::objective::{LossWeights, SclBank};
use crate::trainer::{Ablation, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub features: FeatureKind,
    pub d_t: usize,
    pub d_v: usize,
    pub o: usize,
    pub k_mfb: usize,
    pub d_k: usize,
    pub value_source: ValueSource,
    pub mfb_normalize: bool,

    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_grad_norm: Option<f64>,
    pub track_train_metrics: bool,

    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
    pub tau: f64,
    pub scl_bank: SclBank,

    pub drop_e: bool,
    pub drop_t: bool,
    pub drop_c: bool,
    pub drop_sg: bool,
    pub only_e: bool,
    pub only_t: bool,
    pub only_c: bool,

    pub base_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: u64,
    pub retries: u32,
    pub parallelism: usize,
    pub max_failure_fraction: f64,
    pub top_k: usize,
    pub chained: bool,
    pub use_scene_graph: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let f = FusionConfig::default();
        let t = TrainConfig::default();
        let w = LossWeights::default();
        let e = LlmEndpointConfig::default();
        let r = RationalizeOptions::default();
        Self {
            features: FeatureKind::External,
            d_t: f.d_t,
            d_v: f.d_v,
            o: f.o,
            k_mfb: f.k_mfb,
            d_k: f.d_k,
            value_source: f.value_source,
            mfb_normalize: f.mfb_normalize,
            seed: t.seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            clip_grad_norm: t.clip_grad_norm,
            track_train_metrics: t.track_train_metrics,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            theta: w.theta,
            tau: w.tau,
            scl_bank: t.scl_bank,
            drop_e: false,
            drop_t: false,
            drop_c: false,
            drop_sg: false,
            only_e: false,
            only_t: false,
            only_c: false,
            base_url: e.base_url,
            model_name: DEFAULT_MODEL.into(),
            temperature: e.temperature,
            max_tokens: e.max_tokens,
            timeout_secs: e.timeout_secs,
            retries: e.retries,
            parallelism: r.parallelism,
            max_failure_fraction: r.max_failure_fraction,
            top_k: r.top_k,
            chained: r.chained,
            use_scene_graph: r.use_scene_graph,
        }
    }
}

impl RunConfig {
    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            d_t: self.d_t,
            d_v: self.d_v,
            o: self.o,
            k_mfb: self.k_mfb,
            d_k: self.d_k,
            value_source: self.value_source,
            mfb_normalize: self.mfb_normalize,
            seed: self.seed,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            theta: self.theta,
            tau: self.tau,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            seed: self.seed,
            weights: self.weights(),
            scl_bank: self.scl_bank,
            ablation: Ablation {
                drop_e: self.drop_e,
                drop_t: self.drop_t,
                drop_c: self.drop_c,
                drop_sg: self.drop_sg,
                only_e: self.only_e,
                only_t: self.only_t,
                only_c: self.only_c,
            },
            clip_grad_norm: self.clip_grad_norm,
            track_train_metrics: self.track_train_metrics,
        }
    }

    pub fn endpoint(&self) -> LlmEndpointConfig {
        LlmEndpointConfig {
            base_url: self.base_url.clone(),
            model_name: self.model_name.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            timeout_secs: self.timeout_secs,
            retries: self.retries,
        }
    }

    pub fn rationalize_options(&self) -> RationalizeOptions {
        RationalizeOptions {
            parallelism: self.parallelism,
            max_failure_fraction: self.max_failure_fraction,
            top_k: self.top_k,
            chained: self.chained,
            use_scene_graph: self.use_scene_graph && !self.drop_sg,
        }
    }

    pub fn provider(&self) -> FeatureProvider {
        match self.features {
            FeatureKind::Toy => FeatureProvider::toy(self.d_t, self.d_v, self.seed),
            FeatureKind::External => FeatureProvider::external(self.d_t, self.d_v),
        }
    }

    /// Validate every section.
    pub fn validate(&self) -> Result<()> {
        self.fusion().validate()?;
        self.train().validate()?;
        self.endpoint().validate()?;
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(Error::Config("max_failure_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn keys() -> Vec<String> {
        defaults_map().keys().cloned().collect()
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn defaults_map() -> Map<String, Value> {
    match serde_json::to_value(RunConfig::default()).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("struct serializes to an object"),
    }
}

fn unknown_key(key: &str, known: &Map<String, Value>) -> Error {
    let best = known
        .keys()
        .map(|k| (strsim::levenshtein(key, k), k))
        .min()
        .filter(|(d, _)| *d <= 3);
    match best {
        Some((_, k)) => Error::Config(format!("unknown key `{key}` (did you mean `{k}`?)")),
        None => Error::Config(format!("unknown key `{key}`")),
    }
}

/// Parse a command-line override value: JSON if it parses, else a plain string.
pub fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// `defaults ← file ← overrides`. Unknown keys and type mismatches are
/// configuration errors naming the key. An empty file means all defaults.
pub fn load_config(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig> {
    let defaults = defaults_map();
    let mut layered: Vec<(String, Value)> = Vec::new();
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if !text.trim().is_empty() {
            let v: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.line(),
                message: e.to_string(),
            })?;
            let Value::Object(file) = v else {
                return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
            };
            layered.extend(file);
        }
    }
    layered.extend(overrides.iter().cloned());

    let mut merged = defaults.clone();
    for (k, v) in &layered {
        if !defaults.contains_key(k) {
            return Err(unknown_key(k, &defaults));
        }
        let mut single = defaults.clone();
        single.insert(k.clone(), v.clone());
        if let Err(e) = serde_json::from_value::<RunConfig>(Value::Object(single)) {
            return Err(Error::Config(format!("key `{k}`: {e}")));
        }
        merged.insert(k.clone(), v.clone());
    }
    let cfg: RunConfig = serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
