//! The classifier: factorized bilinear fusion of text and image features,
//! three stacked cross-attention stages over the emotion, target and context
//! rationales, and a two-way softmax head.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::Hop;
use crate::encoder::ResolvedFeatures;
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamStore, Tensor, LAYER_NORM_EPS};

const POWER_NORM_EPS: f64 = 1e-6;

/// Where the attention values come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueSource {
    /// Keys and values from the rationale tokens, query from the fused state.
    Rationale,
    /// Values projected from the query state itself. The weights sum to one,
    /// so the stage output does not depend on the rationale tokens.
    Fused,
}

impl FromStr for ValueSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rationale" => Ok(ValueSource::Rationale),
            "fused" => Ok(ValueSource::Fused),
            other => Err(Error::Config(format!(
                "unknown value source `{other}` (expected rationale or fused)"
            ))),
        }
    }
}

impl fmt::Display for ValueSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueSource::Rationale => "rationale",
            ValueSource::Fused => "fused",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub d_t: usize,
    pub d_v: usize,
    /// MFB output width; also the width of every attention stage output.
    pub o: usize,
    pub k_mfb: usize,
    pub d_k: usize,
    pub value_source: ValueSource,
    /// Signed square root and ℓ2 normalization after pooling.
    #[serde(default)]
    pub mfb_normalize: bool,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_t: 512,
            d_v: 512,
            o: 256,
            k_mfb: 5,
            d_k: 64,
            value_source: ValueSource::Rationale,
            mfb_normalize: false,
            seed: 42,
        }
    }
}

impl FusionConfig {
    /// Small dimensions for tests and the toy encoder.
    pub fn tiny() -> Self {
        Self {
            d_t: 32,
            d_v: 32,
            o: 16,
            k_mfb: 2,
            d_k: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_t", self.d_t),
            ("d_v", self.d_v),
            ("o", self.o),
            ("k_mfb", self.k_mfb),
            ("d_k", self.d_k),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.o < 2 {
            return Err(Error::Config("o must be at least 2 for layer normalization".into()));
        }
        Ok(())
    }

    /// Expected `(path, rows, cols)` of every parameter.
    pub fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let wide = self.k_mfb * self.o;
        let mut shapes = vec![
            ("mfb.U".to_string(), self.d_t, wide),
            ("mfb.V".to_string(), self.d_v, wide),
        ];
        let value_in = match self.value_source {
            ValueSource::Rationale => self.d_t,
            ValueSource::Fused => self.o,
        };
        for stage in Stage::ALL {
            let p = stage.prefix();
            shapes.push((format!("{p}.Wq"), self.o, self.d_k));
            shapes.push((format!("{p}.Wk"), self.d_t, self.d_k));
            shapes.push((format!("{p}.Wv"), value_in, self.o));
            shapes.push((format!("{p}.ln_gain"), 1, self.o));
            shapes.push((format!("{p}.ln_bias"), 1, self.o));
        }
        shapes.push(("head.W".to_string(), self.o, 2));
        shapes.push(("head.b".to_string(), 1, 2));
        shapes
    }

    /// Check that `params` holds exactly the tensors this config expects.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let shapes = self.param_shapes();
        for (path, r, c) in &shapes {
            let t = params
                .get(path)
                .map_err(|_| Error::Integrity(format!("missing parameter `{path}`")))?;
            if t.shape() != [*r, *c] {
                return Err(Error::Integrity(format!(
                    "parameter `{path}` has shape {}x{}, config expects {r}x{c}",
                    t.rows(),
                    t.cols()
                )));
            }
        }
        if params.len() != shapes.len() {
            return Err(Error::Integrity(format!(
                "store holds {} tensors, config expects {}",
                params.len(),
                shapes.len()
            )));
        }
        Ok(())
    }
}

/// The three cross-attention stages, in application order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Emf,
    Timr,
    Ccmi,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Emf, Stage::Timr, Stage::Ccmi];

    pub fn prefix(self) -> &'static str {
        match self {
            Stage::Emf => "emf",
            Stage::Timr => "timr",
            Stage::Ccmi => "ccmi",
        }
    }

    pub fn hop(self) -> Hop {
        match self {
            Stage::Emf => Hop::Emotion,
            Stage::Timr => Hop::Target,
            Stage::Ccmi => Hop::Context,
        }
    }
}

/// Which stages run; a disabled stage passes its input through unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveStages {
    pub emotion: bool,
    pub target: bool,
    pub context: bool,
}

impl Default for ActiveStages {
    fn default() -> Self {
        Self::all()
    }
}

impl ActiveStages {
    pub fn all() -> Self {
        Self {
            emotion: true,
            target: true,
            context: true,
        }
    }

    pub fn none() -> Self {
        Self {
            emotion: false,
            target: false,
            context: false,
        }
    }

    pub fn is_active(&self, hop: Hop) -> bool {
        match hop {
            Hop::Emotion => self.emotion,
            Hop::Target => self.target,
            Hop::Context => self.context,
        }
    }

    pub fn hops(&self) -> Vec<Hop> {
        Hop::ALL.into_iter().filter(|h| self.is_active(*h)).collect()
    }
}

/// Xavier-uniform weights, unit gains, zero biases.
pub fn init_params(cfg: &FusionConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    for (path, r, c) in cfg.param_shapes() {
        let t = if path.ends_with("ln_gain") {
            Tensor::filled(r, c, 1.0)
        } else if path.ends_with("ln_bias") || path == "head.b" {
            Tensor::zeros(r, c)
        } else {
            let a = xavier_bound(r, c);
            Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-a..=a)).collect())?
        };
        store.insert(path, t)?;
    }
    Ok(store)
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `SumPool((ft·U) ∘ (fv·V), k)`, optionally power- and ℓ2-normalized.
pub fn mfb_fuse(g: &mut Graph, ft: NodeId, fv: NodeId, params: &ParamStore, cfg: &FusionConfig) -> Result<NodeId> {
    let u = g.param(params, "mfb.U")?;
    let v = g.param(params, "mfb.V")?;
    let pt = g.matmul(ft, u)?;
    let pv = g.matmul(fv, v)?;
    let joint = g.mul(pt, pv)?;
    let pooled = g.sum_pool(joint, cfg.k_mfb)?;
    if cfg.mfb_normalize {
        let s = g.signed_sqrt(pooled, POWER_NORM_EPS)?;
        g.l2_normalize(s)
    } else {
        Ok(pooled)
    }
}

/// One attention stage: `LayerNorm(softmax(Q·Kᵀ/√d_k)·V + query)`.
pub fn cross_attend(
    g: &mut Graph,
    query: NodeId,
    tokens: NodeId,
    params: &ParamStore,
    stage: Stage,
    cfg: &FusionConfig,
) -> Result<NodeId> {
    let p = stage.prefix();
    let wq = g.param(params, &format!("{p}.Wq"))?;
    let wk = g.param(params, &format!("{p}.Wk"))?;
    let wv = g.param(params, &format!("{p}.Wv"))?;
    let gain = g.param(params, &format!("{p}.ln_gain"))?;
    let bias = g.param(params, &format!("{p}.ln_bias"))?;

    let q = g.matmul(query, wq)?;
    let k = g.matmul(tokens, wk)?;
    let scores = g.matmul_nt(q, k)?;
    let scaled = g.scale(scores, 1.0 / (cfg.d_k as f64).sqrt())?;
    let weights = g.softmax(scaled)?;
    let h = match cfg.value_source {
        ValueSource::Rationale => {
            let values = g.matmul(tokens, wv)?;
            g.matmul(weights, values)?
        }
        ValueSource::Fused => {
            let values = g.matmul(query, wv)?;
            let mass = g.sum(weights)?;
            g.matmul(mass, values)?
        }
    };
    let residual = g.add(h, query)?;
    g.layer_norm(residual, gain, bias, LAYER_NORM_EPS)
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub m: NodeId,
    pub hf: [NodeId; 3],
    pub logits: NodeId,
    pub probabilities: NodeId,
}

/// Record a forward pass on `g`.
pub fn forward_graph(
    g: &mut Graph,
    features: &ResolvedFeatures,
    params: &ParamStore,
    cfg: &FusionConfig,
    stages: ActiveStages,
) -> Result<ForwardNodes> {
    for (name, t, want) in [("ft", &features.ft, cfg.d_t), ("fv", &features.fv, cfg.d_v)] {
        if t.shape() != [1, want] {
            return Err(Error::dim(
                "forward",
                format!("{name} has shape {}, expected 1x{want}", t.shape_str()),
            ));
        }
    }
    let ft = g.constant(features.ft.clone())?;
    let fv = g.constant(features.fv.clone())?;
    let m = mfb_fuse(g, ft, fv, params, cfg)?;

    let mut state = m;
    let mut hf = [m; 3];
    for stage in Stage::ALL {
        let hop = stage.hop();
        if stages.is_active(hop) {
            let tokens = features.tokens_for(hop).ok_or_else(|| {
                Error::DataCompleteness(format!("no {hop} rationale tokens for an active stage"))
            })?;
            if tokens.cols() != cfg.d_t {
                return Err(Error::dim(
                    "forward",
                    format!("{hop} tokens have shape {}, expected Lx{}", tokens.shape_str(), cfg.d_t),
                ));
            }
            let t = g.constant(tokens.clone())?;
            state = cross_attend(g, state, t, params, stage, cfg)?;
        }
        hf[hop.index()] = state;
    }

    let w = g.param(params, "head.W")?;
    let b = g.param(params, "head.b")?;
    let proj = g.matmul(state, w)?;
    let logits = g.add(proj, b)?;
    let probabilities = g.softmax(logits)?;
    Ok(ForwardNodes {
        m,
        hf,
        logits,
        probabilities,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub m: Tensor,
    pub hf1: Tensor,
    pub hf2: Tensor,
    pub hf3: Tensor,
    pub logits: Tensor,
    pub probabilities: Tensor,
}

pub fn forward(
    features: &ResolvedFeatures,
    params: &ParamStore,
    cfg: &FusionConfig,
    stages: ActiveStages,
) -> Result<ForwardTrace> {
    let mut g = Graph::new();
    let n = forward_graph(&mut g, features, params, cfg, stages)?;
    Ok(ForwardTrace {
        m: g.value(n.m).clone(),
        hf1: g.value(n.hf[0]).clone(),
        hf2: g.value(n.hf[1]).clone(),
        hf3: g.value(n.hf[2]).clone(),
        logits: g.value(n.logits).clone(),
        probabilities: g.value(n.probabilities).clone(),
    })
}

/// Argmax over the two classes; an exact tie goes to label 0.
pub fn classify(probabilities: &Tensor) -> u8 {
    let p = probabilities.data();
    u8::from(p[1] > p[0])
}
