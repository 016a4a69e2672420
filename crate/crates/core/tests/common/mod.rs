#![allow(dead_code)]

use m3hop_core::cot::{rationalize_dataset, LlmEndpointConfig, MockTransport, PromptHop, RationaleCache, RationalizeOptions};
use m3hop_core::datamodel::{MemeRecord, RationaleSet};
use m3hop_core::encoder::FeatureProvider;
use m3hop_core::fusion::FusionConfig;
use m3hop_core::numerics::Tensor;
use m3hop_core::objective::LossWeights;
use m3hop_core::synthetic::{planted, PlantedSpec};
use m3hop_core::trainer::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Rows of a tensor as nested vectors, for loop oracles.
pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_rows()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x · W` for a row vector and a matrix given as rows.
pub fn vec_mat(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i][j];
        }
    }
    out
}

pub fn layer_norm_loop(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(gain)
        .zip(bias)
        .map(|((v, g), b)| g * (v - mean) * inv + b)
        .collect()
}

pub fn softmax_loop(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// The planted dataset pushed through the mock LLM and a fresh cache.
pub struct PlantedRun {
    pub records: Vec<MemeRecord>,
    pub rationales: RationaleSet,
    pub requests: usize,
    pub mock_calls: usize,
}

pub fn planted_via_mock(seed: u64) -> PlantedRun {
    let data = planted(&PlantedSpec { seed, ..PlantedSpec::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cache = RationaleCache::open(dir.path()).unwrap();
    let mock = MockTransport::new(data.mock_answers.clone());
    let outcome = rationalize_dataset(
        &data.records,
        &PromptHop::defaults(),
        &LlmEndpointConfig::default(),
        &cache,
        &mock,
        &RationalizeOptions::default(),
    )
    .unwrap();
    assert!(outcome.failures.is_empty(), "{:?}", outcome.failures);
    PlantedRun {
        records: data.records,
        rationales: RationaleSet::from_records(outcome.rationales).unwrap(),
        requests: outcome.requests,
        mock_calls: mock.calls(),
    }
}

/// Desk-scale run: toy dims, batch 16, lr 1e-3, 200 epochs, published loss weights.
pub fn toy_configs(seed: u64) -> (TrainConfig, FusionConfig, FeatureProvider) {
    let fusion = FusionConfig {
        seed,
        ..FusionConfig::tiny()
    };
    let train = TrainConfig {
        epochs: 200,
        batch_size: 16,
        learning_rate: 1e-3,
        seed,
        weights: LossWeights::default(),
        track_train_metrics: true,
        ..TrainConfig::default()
    };
    let provider = FeatureProvider::toy(fusion.d_t, fusion.d_v, seed);
    (train, fusion, provider)
}

/// Metrics recomputed from scratch by enumerating every (gold, predicted) cell.
pub struct BruteMetrics {
    pub confusion: [[usize; 2]; 2],
    pub precision: [f64; 2],
    pub recall: [f64; 2],
    pub f1: [f64; 2],
    pub support: [usize; 2],
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

pub fn brute_metrics(pred: &[u8], gold: &[u8]) -> BruteMetrics {
    let mut confusion = [[0usize; 2]; 2];
    for g in 0..2u8 {
        for p in 0..2u8 {
            confusion[g as usize][p as usize] = pred.iter().zip(gold).filter(|(x, y)| **x == p && **y == g).count();
        }
    }
    let mut precision = [0.0; 2];
    let mut recall = [0.0; 2];
    let mut f1 = [0.0; 2];
    let mut support = [0usize; 2];
    for c in 0..2u8 {
        let tp = pred.iter().zip(gold).filter(|(p, g)| **p == c && **g == c).count();
        let fp = pred.iter().zip(gold).filter(|(p, g)| **p == c && **g != c).count();
        let fn_ = pred.iter().zip(gold).filter(|(p, g)| **p != c && **g == c).count();
        let i = c as usize;
        support[i] = tp + fn_;
        precision[i] = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        recall[i] = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        f1[i] = if precision[i] + recall[i] == 0.0 {
            0.0
        } else {
            2.0 * precision[i] * recall[i] / (precision[i] + recall[i])
        };
    }
    BruteMetrics {
        confusion,
        precision,
        recall,
        f1,
        support,
        macro_f1: (f1[0] + f1[1]) / 2.0,
        weighted_f1: (f1[0] * support[0] as f64 + f1[1] * support[1] as f64) / gold.len() as f64,
    }
}

/// `M[j] = Σ_{t in window j} (ft·U[:,t]) (fv·V[:,t])`, the bilinear form
/// `ft · W_j · fvᵀ` with `W_j = Σ_t U[:,t] V[:,t]ᵀ`.
pub fn mfb_bilinear_oracle(ft: &[f64], fv: &[f64], u: &[Vec<f64>], v: &[Vec<f64>], k: usize) -> Vec<f64> {
    let wide = u[0].len();
    let o = wide / k;
    let mut out = vec![0.0; o];
    for (j, slot) in out.iter_mut().enumerate() {
        // W_j as an explicit d_t × d_v matrix
        let mut w = vec![vec![0.0; fv.len()]; ft.len()];
        for t in j * k..(j + 1) * k {
            for a in 0..ft.len() {
                for b in 0..fv.len() {
                    w[a][b] += u[a][t] * v[b][t];
                }
            }
        }
        let mut acc = 0.0;
        for a in 0..ft.len() {
            for b in 0..fv.len() {
                acc += ft[a] * w[a][b] * fv[b];
            }
        }
        *slot = acc;
    }
    out
}

/// One attention stage with explicit loops:
/// `LayerNorm(Σ_l softmax_l(q·k_l/√d_k) v_l + query)`.
pub fn attention_oracle(
    query: &[f64],
    tokens: &[Vec<f64>],
    wq: &[Vec<f64>],
    wk: &[Vec<f64>],
    wv: &[Vec<f64>],
    gain: &[f64],
    bias: &[f64],
    fused_values: bool,
) -> Vec<f64> {
    let d_k = wq[0].len() as f64;
    let q = vec_mat(query, wq);
    let scores: Vec<f64> = tokens.iter().map(|t| dot(&q, &vec_mat(t, wk)) / d_k.sqrt()).collect();
    let w = softmax_loop(&scores);
    let mut h = vec![0.0; query.len()];
    for (l, t) in tokens.iter().enumerate() {
        let v = if fused_values { vec_mat(query, wv) } else { vec_mat(t, wv) };
        for (hi, vi) in h.iter_mut().zip(&v) {
            *hi += w[l] * vi;
        }
    }
    let resid: Vec<f64> = h.iter().zip(query).map(|(a, b)| a + b).collect();
    layer_norm_loop(&resid, gain, bias, 1e-5)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
