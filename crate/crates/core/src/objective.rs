//! Training objective: binary cross-entropy plus three contrastive terms that
//! align each attention stage's output with the fused representation `M`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Cross-entropy.
    pub alpha: f64,
    /// Emotion-stage alignment.
    pub beta: f64,
    /// Target-stage alignment.
    pub gamma: f64,
    /// Context-stage alignment.
    pub theta: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            gamma: 0.3,
            theta: 0.4,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn cross_entropy_only() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            theta: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.alpha, self.beta, self.gamma, self.theta];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {ws:?}")));
        }
        if ws.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    /// Weights of the three alignment terms in stage order.
    pub fn alignment(&self) -> [f64; 3] {
        [self.beta, self.gamma, self.theta]
    }
}

/// Candidate set for the contrastive denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SclBank {
    /// `[M_1..M_N, HF_1..HF_N]` without the anchor itself.
    #[default]
    #[serde(rename = "full")]
    Full,
    /// `[M_1..M_N]` only.
    #[serde(rename = "m-only")]
    MOnly,
}

impl FromStr for SclBank {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SclBank::Full),
            "m-only" => Ok(SclBank::MOnly),
            other => Err(Error::Config(format!("unknown scl bank `{other}` (expected full or m-only)"))),
        }
    }
}

impl fmt::Display for SclBank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SclBank::Full => "full",
            SclBank::MOnly => "m-only",
        })
    }
}

/// Mean over the batch of `−[y·ln ŷ + (1−y)·ln(1−ŷ)]`, `ŷ` = P(class 1).
pub fn cross_entropy_graph(g: &mut Graph, probabilities: &[NodeId], labels: &[u8]) -> Result<NodeId> {
    if probabilities.is_empty() || probabilities.len() != labels.len() {
        return Err(Error::Integrity(format!(
            "cross-entropy needs matching non-empty batches, got {} predictions and {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    let mut per_sample = Vec::with_capacity(labels.len());
    for (&p, &y) in probabilities.iter().zip(labels) {
        let p1 = g.select(p, 1)?;
        let target = if y == 1 { p1 } else { g.affine(p1, -1.0, 1.0)? };
        let log = g.log_clamped(target, LOG_FLOOR)?;
        per_sample.push(g.scale(log, -1.0)?);
    }
    g.mean_scalars(&per_sample)
}

pub fn cross_entropy_loss(probabilities: &[Tensor], labels: &[u8]) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = probabilities
        .iter()
        .map(|p| g.constant(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = cross_entropy_graph(&mut g, &nodes, labels)?;
    g.value(loss).item()
}

pub struct SclNodes {
    pub per_sample: Vec<NodeId>,
    pub mean: NodeId,
}

/// Contrastive alignment of `anchors[i]` (an HF view) with `bases[i]` (its `M`).
///
/// Per anchor: `−log(exp(sim(HF_i, M_i)/τ) / Σ_{b ∈ bank} exp(sim(HF_i, b)/τ))`.
pub fn scl_graph(g: &mut Graph, anchors: &[NodeId], bases: &[NodeId], tau: f64, bank: SclBank) -> Result<SclNodes> {
    let n = anchors.len();
    if n < 2 || bases.len() != n {
        return Err(Error::Integrity(format!(
            "contrastive loss needs N >= 2 matching views, got {n} anchors and {} bases",
            bases.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    for (kind, views) in [("anchor", anchors), ("base", bases)] {
        for (i, &v) in views.iter().enumerate() {
            if g.value(v).norm() == 0.0 {
                return Err(Error::DegenerateVector(format!("{kind} view of sample {i} has zero norm")));
            }
        }
    }
    let candidates: Vec<NodeId> = match bank {
        SclBank::Full => bases.iter().chain(anchors).copied().collect(),
        SclBank::MOnly => bases.to_vec(),
    };
    let mut per_sample = Vec::with_capacity(n);
    for i in 0..n {
        let mut logits = Vec::with_capacity(candidates.len());
        let mut positive = None;
        for (l, &c) in candidates.iter().enumerate() {
            if bank == SclBank::Full && l == n + i {
                continue;
            }
            let sim = g.cosine(anchors[i], c)?;
            let scaled = g.scale(sim, 1.0 / tau)?;
            if l == i {
                positive = Some(scaled);
            }
            logits.push(scaled);
        }
        let row = g.concat_cols(&logits)?;
        let lse = g.log_sum_exp(row)?;
        let neg_pos = g.scale(positive.expect("positive is in the bank"), -1.0)?;
        per_sample.push(g.add(lse, neg_pos)?);
    }
    let mean = g.mean_scalars(&per_sample)?;
    Ok(SclNodes { per_sample, mean })
}

fn scl_values(anchors: &[Tensor], bases: &[Tensor], tau: f64, bank: SclBank) -> Result<(Vec<f64>, f64)> {
    let mut g = Graph::new();
    let a = anchors.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
    let b = bases.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
    let nodes = scl_graph(&mut g, &a, &b, tau, bank)?;
    let per = nodes
        .per_sample
        .iter()
        .map(|&n| g.value(n).item())
        .collect::<Result<Vec<_>>>()?;
    Ok((per, g.value(nodes.mean).item()?))
}

pub fn scl_loss(anchors: &[Tensor], bases: &[Tensor], tau: f64, bank: SclBank) -> Result<f64> {
    scl_values(anchors, bases, tau, bank).map(|(_, m)| m)
}

pub fn scl_per_sample(anchors: &[Tensor], bases: &[Tensor], tau: f64, bank: SclBank) -> Result<Vec<f64>> {
    scl_values(anchors, bases, tau, bank).map(|(p, _)| p)
}

/// `α·ce + β·l_em + γ·l_ta + θ·l_co`
pub fn composite_loss(ce: f64, l_em: f64, l_ta: f64, l_co: f64, w: &LossWeights) -> f64 {
    w.alpha * ce + w.beta * l_em + w.gamma * l_ta + w.theta * l_co
}

/// Weighted sum of `(weight, node)` terms; zero-weight terms are skipped.
pub fn weighted_sum_graph(g: &mut Graph, terms: &[(f64, NodeId)]) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for &(w, node) in terms {
        if w == 0.0 {
            continue;
        }
        let scaled = g.scale(node, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, scaled)?,
            None => scaled,
        });
    }
    acc.ok_or_else(|| Error::Config("every loss term has zero weight".into()))
}
