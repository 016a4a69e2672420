//! Seeded Adam training over the composite objective, plus checkpoint I/O.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{make_batches, write_atomic, Hop, MemeRecord, RationaleSet, Split};
use crate::encoder::{resolve_features, FeatureProvider, ResolvedFeatures};
use crate::error::{Error, Result};
use crate::evaluator::{compute_metrics, MetricsReport};
use crate::fusion::{classify, forward, forward_graph, init_params, ActiveStages, FusionConfig};
use crate::numerics::{Gradients, Graph, ParamStore, Tensor};
use crate::objective::{cross_entropy_graph, scl_graph, weighted_sum_graph, LossWeights, SclBank};

pub const CHECKPOINT_SCHEMA: &str = "m3hop-ckpt/1";

/// Which hops feed the model. The `only_*` flags win over the `drop_*` flags.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub drop_e: bool,
    pub drop_t: bool,
    pub drop_c: bool,
    /// Rationales were generated without the scene-graph block.
    pub drop_sg: bool,
    pub only_e: bool,
    pub only_t: bool,
    pub only_c: bool,
}

impl Ablation {
    pub fn validate(&self) -> Result<()> {
        let only = [self.only_e, self.only_t, self.only_c].iter().filter(|b| **b).count();
        if only > 1 {
            return Err(Error::Config("at most one of only_e, only_t, only_c may be set".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> ActiveStages {
        if self.only_e || self.only_t || self.only_c {
            return ActiveStages {
                emotion: self.only_e,
                target: self.only_t,
                context: self.only_c,
            };
        }
        ActiveStages {
            emotion: !self.drop_e,
            target: !self.drop_t,
            context: !self.drop_c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub scl_bank: SclBank,
    pub ablation: Ablation,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_grad_norm: Option<f64>,
    /// Also score the train split after every epoch.
    pub track_train_metrics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            learning_rate: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
            weights: LossWeights::default(),
            scl_bank: SclBank::Full,
            ablation: Ablation::default(),
            clip_grad_norm: None,
            track_train_metrics: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_grad_norm must be positive".into()));
            }
        }
        self.weights.validate()?;
        self.ablation.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |_: ()| {
            params
                .iter()
                .map(|(p, t)| (p.to_string(), Tensor::zeros(t.rows(), t.cols())))
                .collect::<BTreeMap<_, _>>()
        };
        Self {
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
) -> Result<()> {
    let paths: Vec<String> = params.paths().map(str::to_string).collect();
    for path in &paths {
        let shape = params.get(path)?.shape();
        let ok = |t: Option<&Tensor>| t.is_some_and(|t| t.shape() == shape);
        if !ok(grads.get(path)) || !ok(state.m.get(path)) || !ok(state.v.get(path)) {
            return Err(Error::Integrity(format!(
                "adam: gradient or moment for `{path}` is missing or not shaped {}x{}",
                shape[0], shape[1]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for path in &paths {
        let g = grads.get(path).expect("checked").data();
        let m = state.m.get_mut(path).expect("checked").data_mut();
        let v = state.v.get_mut(path).expect("checked").data_mut();
        let w = params.get_mut(path).expect("checked").data_mut();
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// A meme with its model inputs resolved.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub label: u8,
    pub features: ResolvedFeatures,
}

/// Resolve one meme, requiring a rationale for every active hop.
pub fn prepare_sample(
    record: &MemeRecord,
    rationales: &RationaleSet,
    provider: &FeatureProvider,
    stages: ActiveStages,
) -> Result<Sample> {
    let mut refs = [None, None, None];
    let mut missing = Vec::new();
    for hop in Hop::ALL {
        if stages.is_active(hop) {
            match rationales.get(&record.id, hop) {
                Some(r) => refs[hop.index()] = Some(r),
                None => missing.push(hop.tag()),
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::DataCompleteness(format!(
            "meme {} has no rationale for hop(s) {}",
            record.id,
            missing.join(", ")
        )));
    }
    Ok(Sample {
        id: record.id.clone(),
        label: record.label,
        features: resolve_features(record, refs, provider)?,
    })
}

/// Resolve every record; fails on the first incomplete one.
pub fn prepare_samples(
    records: &[&MemeRecord],
    rationales: &RationaleSet,
    provider: &FeatureProvider,
    stages: ActiveStages,
) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| prepare_sample(r, rationales, provider, stages))
        .collect()
}

/// Loss parts of one batch. Alignment terms are `None` when skipped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub total: f64,
    pub ce: f64,
    pub em: Option<f64>,
    pub ta: Option<f64>,
    pub co: Option<f64>,
}

/// Forward every sample of the batch on one graph, evaluate the composite
/// loss and backpropagate. An alignment term runs only when its stage is
/// active and its weight is non-zero.
pub fn batch_objective(
    params: &ParamStore,
    batch: &[&Sample],
    fusion: &FusionConfig,
    train: &TrainConfig,
) -> Result<(BatchLoss, Gradients)> {
    let stages = train.ablation.stages();
    let w = &train.weights;
    let mut g = Graph::new();
    let mut outs = Vec::with_capacity(batch.len());
    for s in batch {
        outs.push(forward_graph(&mut g, &s.features, params, fusion, stages)?);
    }
    let labels: Vec<u8> = batch.iter().map(|s| s.label).collect();
    let probs: Vec<_> = outs.iter().map(|o| o.probabilities).collect();
    let ce = cross_entropy_graph(&mut g, &probs, &labels)?;
    let mut terms = vec![(w.alpha, ce)];
    let mut parts = [None; 3];
    let bases: Vec<_> = outs.iter().map(|o| o.m).collect();
    for (hop, weight) in Hop::ALL.into_iter().zip(w.alignment()) {
        if weight == 0.0 || !stages.is_active(hop) {
            continue;
        }
        let anchors: Vec<_> = outs.iter().map(|o| o.hf[hop.index()]).collect();
        let scl = scl_graph(&mut g, &anchors, &bases, w.tau, train.scl_bank)?;
        terms.push((weight, scl.mean));
        parts[hop.index()] = Some(scl.mean);
    }
    let total = weighted_sum_graph(&mut g, &terms)?;
    let grads = g.backward(total, params)?;
    let value = |n| g.value(n).item();
    let loss = BatchLoss {
        total: value(total)?,
        ce: value(ce)?,
        em: parts[0].map(value).transpose()?,
        ta: parts[1].map(value).transpose()?,
        co: parts[2].map(value).transpose()?,
    };
    Ok((loss, grads))
}

pub fn predict_samples(
    params: &ParamStore,
    samples: &[Sample],
    fusion: &FusionConfig,
    stages: ActiveStages,
) -> Result<Vec<u8>> {
    samples
        .iter()
        .map(|s| forward(&s.features, params, fusion, stages).map(|t| classify(&t.probabilities)))
        .collect()
}

fn score(params: &ParamStore, samples: &[Sample], fusion: &FusionConfig, stages: ActiveStages) -> Result<Option<MetricsReport>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let preds = predict_samples(params, samples, fusion, stages)?;
    let golds: Vec<u8> = samples.iter().map(|s| s.label).collect();
    compute_metrics(&preds, &golds).map(Some)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of batch losses.
    pub train_loss: f64,
    pub ce: f64,
    pub em: Option<f64>,
    pub ta: Option<f64>,
    pub co: Option<f64>,
    pub grad_norm: f64,
    pub train_macro_f1: Option<f64>,
    pub dev: Option<MetricsReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best dev macro-F1 (the final epoch without a dev split).
    pub best_params: ParamStore,
    pub final_params: ParamStore,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Train on the `train` split, tracking `dev` after each epoch.
pub fn train(
    records: &[MemeRecord],
    rationales: &RationaleSet,
    provider: &FeatureProvider,
    train_cfg: &TrainConfig,
    fusion_cfg: &FusionConfig,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    fusion_cfg.validate()?;
    if provider.d_t != fusion_cfg.d_t || provider.d_v != fusion_cfg.d_v {
        return Err(Error::Config(format!(
            "feature dims {}x{} do not match model dims {}x{}",
            provider.d_t, provider.d_v, fusion_cfg.d_t, fusion_cfg.d_v
        )));
    }
    let stages = train_cfg.ablation.stages();
    let of = |split: Split| records.iter().filter(|r| r.split == split).collect::<Vec<_>>();
    let train_set = prepare_samples(&of(Split::Train), rationales, provider, stages)?;
    let dev_set = prepare_samples(&of(Split::Dev), rationales, provider, stages)?;
    if train_set.len() < 2 {
        return Err(Error::DataCompleteness(format!(
            "need at least 2 training memes, got {}",
            train_set.len()
        )));
    }
    train_samples(&train_set, &dev_set, train_cfg, fusion_cfg)
}

/// Training loop over already-resolved samples.
pub fn train_samples(
    train_set: &[Sample],
    dev_set: &[Sample],
    train_cfg: &TrainConfig,
    fusion_cfg: &FusionConfig,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    let stages = train_cfg.ablation.stages();
    let mut params = init_params(fusion_cfg)?;
    let mut adam = AdamState::new(&params);
    let mut history = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 0..train_cfg.epochs {
        let batches = make_batches(train_set.len(), train_cfg.batch_size, train_cfg.seed.wrapping_add(epoch as u64), true)?;
        let mut sums = [0.0f64; 5];
        let mut seen = [false; 3];
        let mut grad_norm_sum = 0.0;
        for idx in &batches {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grads) = batch_objective(&params, &batch, fusion_cfg, train_cfg)?;
            let norm = grads.global_norm();
            if let Some(c) = train_cfg.clip_grad_norm {
                if norm > c {
                    grads.scale(c / norm);
                }
            }
            adam_step(
                &mut params,
                &grads,
                &mut adam,
                train_cfg.learning_rate,
                train_cfg.beta1,
                train_cfg.beta2,
                train_cfg.adam_eps,
            )?;
            let n = batch.len() as f64;
            sums[0] += n * loss.total;
            sums[1] += n * loss.ce;
            for (k, part) in [loss.em, loss.ta, loss.co].into_iter().enumerate() {
                if let Some(v) = part {
                    sums[2 + k] += n * v;
                    seen[k] = true;
                }
            }
            grad_norm_sum += norm;
        }
        let total_n = train_set.len() as f64;
        let part = |k: usize| seen[k].then(|| sums[2 + k] / total_n);
        let dev = score(&params, dev_set, fusion_cfg, stages)?;
        let train_macro_f1 = if train_cfg.track_train_metrics {
            score(&params, train_set, fusion_cfg, stages)?.map(|m| m.macro_f1)
        } else {
            None
        };
        let selector = dev.as_ref().map(|d| d.macro_f1);
        match (&best, selector) {
            (_, None) => {}
            (Some((b, _, _)), Some(f)) if f <= *b => {}
            (_, Some(f)) => best = Some((f, epoch, params.clone())),
        }
        history.push(EpochRecord {
            epoch,
            train_loss: sums[0] / total_n,
            ce: sums[1] / total_n,
            em: part(0),
            ta: part(1),
            co: part(2),
            grad_norm: grad_norm_sum / batches.len() as f64,
            train_macro_f1,
            dev,
        });
    }
    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (train_cfg.epochs - 1, params.clone()),
    };
    Ok(TrainOutcome {
        best_params,
        final_params: params,
        best_epoch,
        history,
    })
}

/// History as one JSON object per line.
pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in history {
        writeln!(out, "{}", serde_json::to_string(rec).expect("history serializes")).unwrap();
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    schema: String,
    config: FusionConfig,
    tensors: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    path: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

/// Header line followed by one line per tensor in path order. Values are
/// written as shortest round-trip decimals, so reloading is exact.
pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamStore, cfg: &FusionConfig) -> Result<()> {
    cfg.check_params(params)?;
    let header = CheckpointHeader {
        schema: CHECKPOINT_SCHEMA.into(),
        config: cfg.clone(),
        tensors: params.len(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for (p, t) in params.iter() {
        let line = CheckpointTensor {
            path: p.to_string(),
            shape: t.shape(),
            data: t.data().to_vec(),
        };
        out.push_str(&serde_json::to_string(&line).expect("tensor serializes"));
        out.push('\n');
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

/// Load a checkpoint; when `expected` is given its config must match exactly.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&FusionConfig>) -> Result<(ParamStore, FusionConfig)> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = content.lines();
    let first = lines.next().ok_or_else(|| parse(1, "empty checkpoint".into()))?;
    let head: serde_json::Value = serde_json::from_str(first).map_err(|e| parse(1, e.to_string()))?;
    let schema = head.get("schema").and_then(|s| s.as_str()).unwrap_or_default();
    if schema != CHECKPOINT_SCHEMA {
        return Err(Error::Version(format!(
            "checkpoint schema `{schema}`, expected `{CHECKPOINT_SCHEMA}`"
        )));
    }
    let header: CheckpointHeader = serde_json::from_value(head).map_err(|e| parse(1, e.to_string()))?;
    if let Some(want) = expected {
        if *want != header.config {
            return Err(Error::Config(format!(
                "checkpoint config {} does not match expected {}",
                serde_json::to_string(&header.config).unwrap(),
                serde_json::to_string(want).unwrap()
            )));
        }
    }
    let mut params = ParamStore::new();
    let mut count = 0;
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: CheckpointTensor = serde_json::from_str(line).map_err(|e| parse(i + 2, e.to_string()))?;
        let tensor = Tensor::new(t.shape[0], t.shape[1], t.data).map_err(|e| parse(i + 2, e.to_string()))?;
        params.insert(t.path, tensor)?;
        count += 1;
    }
    if count != header.tensors {
        return Err(parse(
            count + 2,
            format!("truncated checkpoint: {count} of {} tensors", header.tensors),
        ));
    }
    header.config.check_params(&params)?;
    Ok((params, header.config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap()).unwrap();
        p.insert("b", Tensor::row(vec![0.25, -0.75, 4.0]).unwrap()).unwrap();
        p
    }

    fn grads(p: &ParamStore, f: impl Fn(usize) -> f64) -> Gradients {
        let mut g = Gradients::zeros_like(p);
        let mut k = 0;
        for path in ["a", "b"] {
            for x in g.get_mut(path).unwrap().data_mut() {
                *x = f(k);
                k += 1;
            }
        }
        g
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = store();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let zero = Gradients::zeros_like(&p);
        adam_step(&mut p, &zero, &mut s, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(s.step, 1);
        for (path, t) in before.iter() {
            assert_eq!(p.get(path).unwrap(), t);
        }
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut p = store();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let g = grads(&p, |k| if k % 2 == 0 { 0.3 + k as f64 } else { -2.0 * (k as f64 + 1.0) });
        let lr = 1e-3;
        adam_step(&mut p, &g, &mut s, lr, 0.9, 0.999, 1e-8).unwrap();
        for (path, t) in before.iter() {
            let after = p.get(path).unwrap().data();
            let gr = g.get(path).unwrap().data();
            for i in 0..t.len() {
                let delta = after[i] - t.data()[i];
                assert!((delta + lr * gr[i].signum()).abs() < 1e-9 * lr.max(1.0), "{delta}");
            }
        }
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let mut p = store();
        let mut s = AdamState::new(&p);
        let mut other = ParamStore::new();
        other.insert("a", Tensor::zeros(1, 1)).unwrap();
        other.insert("b", Tensor::zeros(1, 3)).unwrap();
        let bad = Gradients::zeros_like(&other);
        let err = adam_step(&mut p, &bad, &mut s, 0.1, 0.9, 0.999, 1e-8).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn ablation_stage_selection() {
        assert_eq!(Ablation::default().stages(), ActiveStages::all());
        let only_t = Ablation { only_t: true, drop_t: true, ..Default::default() }.stages();
        assert_eq!(only_t.hops(), vec![Hop::Target]);
        let no_c = Ablation { drop_c: true, ..Default::default() }.stages();
        assert_eq!(no_c.hops(), vec![Hop::Emotion, Hop::Target]);
        assert!(Ablation { only_e: true, only_c: true, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
    }
}
