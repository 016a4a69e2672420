//! Feature resolution: either exported vectors read from the ingestion files,
//! or a deterministic hashed-token encoder that needs nothing external.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{select_top_eor, Hop, MemeRecord, RationaleRecord};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Stand-in token for empty text.
pub const EMPTY_TOKEN: &str = "<empty>";

/// Number of scene-graph relations folded into the toy visual feature.
pub const TOY_EOR_K: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    External,
    Toy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureProvider {
    pub kind: FeatureKind,
    pub d_t: usize,
    pub d_v: usize,
    pub seed: u64,
}

impl FeatureProvider {
    pub fn toy(d_t: usize, d_v: usize, seed: u64) -> Self {
        Self {
            kind: FeatureKind::Toy,
            d_t,
            d_v,
            seed,
        }
    }

    pub fn external(d_t: usize, d_v: usize) -> Self {
        Self {
            kind: FeatureKind::External,
            d_t,
            d_v,
            seed: 0,
        }
    }
}

/// Everything the model consumes for one meme. Token matrices are `None`
/// for hops that were not requested.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedFeatures {
    pub ft: Tensor,
    pub fv: Tensor,
    pub tokens: [Option<Tensor>; 3],
}

impl ResolvedFeatures {
    pub fn tokens_for(&self, hop: Hop) -> Option<&Tensor> {
        self.tokens[hop.index()].as_ref()
    }
}

fn token_vector(token: &str, d: usize, seed: u64) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(token.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Lowercase, split on whitespace, map each token to a seeded unit vector.
pub fn toy_encode_tokens(text: &str, d: usize, seed: u64) -> Result<Tensor> {
    if d < 4 {
        return Err(Error::Config(format!("toy encoder width must be at least 4, got {d}")));
    }
    let lower = text.to_lowercase();
    let mut tokens: Vec<&str> = lower.split_whitespace().collect();
    if tokens.is_empty() {
        tokens.push(EMPTY_TOKEN);
    }
    let data: Vec<f64> = tokens.iter().flat_map(|t| token_vector(t, d, seed)).collect();
    Tensor::new(tokens.len(), d, data)
}

/// Mean over rows.
pub fn pool_tokens(tokens: &Tensor) -> Tensor {
    let [l, d] = tokens.shape();
    let mut out = vec![0.0; d];
    for r in 0..l {
        for (o, v) in out.iter_mut().zip(tokens.row_slice(r)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= l as f64;
    }
    Tensor::row(out).expect("d > 0")
}

fn check_len(meme_id: &str, field: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Schema(format!(
            "meme {meme_id} field {field}: expected length {want}, got {got}"
        )));
    }
    Ok(())
}

/// Resolve the model inputs for one meme. `rationales[h]` is the rationale of
/// hop `h` (E, T, C order); `None` entries yield no token matrix.
pub fn resolve_features(
    record: &MemeRecord,
    rationales: [Option<&RationaleRecord>; 3],
    provider: &FeatureProvider,
) -> Result<ResolvedFeatures> {
    let (d_t, d_v) = (provider.d_t, provider.d_v);
    let resolved = match provider.kind {
        FeatureKind::Toy => {
            let ft = pool_tokens(&toy_encode_tokens(&record.text, d_t, provider.seed)?);
            let eor_text = select_top_eor(&record.eors, TOY_EOR_K)
                .iter()
                .map(|t| t.phrase())
                .collect::<Vec<_>>()
                .join(" ");
            let fv = pool_tokens(&toy_encode_tokens(&eor_text, d_v, provider.seed.wrapping_add(1))?);
            let mut tokens = [None, None, None];
            for (slot, r) in tokens.iter_mut().zip(rationales) {
                if let Some(r) = r {
                    *slot = Some(toy_encode_tokens(&r.text, d_t, provider.seed)?);
                }
            }
            ResolvedFeatures { ft, fv, tokens }
        }
        FeatureKind::External => {
            let missing = |field: &str| Error::MissingFeature {
                meme_id: record.id.clone(),
                field: field.to_string(),
            };
            let ft = record.ft.as_ref().ok_or_else(|| missing("ft"))?;
            let fv = record.fv.as_ref().ok_or_else(|| missing("fv"))?;
            check_len(&record.id, "ft", ft.len(), d_t)?;
            check_len(&record.id, "fv", fv.len(), d_v)?;
            let mut tokens = [None, None, None];
            for (i, r) in rationales.into_iter().enumerate() {
                if let Some(r) = r {
                    let field = format!("tokens_{}", Hop::ALL[i].tag());
                    let m = r.token_matrix().ok_or_else(|| missing(&field))?;
                    check_len(&record.id, &field, m.cols(), d_t)?;
                    tokens[i] = Some(m);
                }
            }
            ResolvedFeatures {
                ft: Tensor::row(ft.clone())?,
                fv: Tensor::row(fv.clone())?,
                tokens,
            }
        }
    };
    let all_finite = resolved.ft.is_finite()
        && resolved.fv.is_finite()
        && resolved.tokens.iter().flatten().all(Tensor::is_finite);
    if !all_finite {
        return Err(Error::NonFinite("resolve_features"));
    }
    Ok(resolved)
}
