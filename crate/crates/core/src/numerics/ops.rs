//! Forward kernels. The compute graph calls these and records what the
//! backward pass needs; they are also usable as plain functions.

use super::Tensor;
use crate::error::{Error, Result};

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.shape();
    let [k2, n] = b.shape();
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("cannot multiply {} by {}", a.shape_str(), b.shape_str()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = ad[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[t * n..(t + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(m, n, out)
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.shape();
    let [n, k2] = b.shape();
    if k != k2 {
        return Err(Error::dim(
            "matmul_nt",
            format!("cannot multiply {} by transpose of {}", a.shape_str(), b.shape_str()),
        ));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = a.row_slice(i);
        for j in 0..n {
            out[i * n + j] = ar.iter().zip(b.row_slice(j)).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(m, n, out)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shapes {} and {} differ", a.shape_str(), b.shape_str()),
        ));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let [r, c] = a.shape();
    Tensor::new(r, c, a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("hadamard", a, b)?;
    let [r, c] = a.shape();
    Tensor::new(r, c, a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect())
}

/// Non-overlapping window sum along each row: `y[j] = Σ_{t<k} x[j·k + t]`.
pub fn sum_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let [r, c] = x.shape();
    if k == 0 || c % k != 0 {
        return Err(Error::dim(
            "sum_pool",
            format!("row length {c} is not divisible by window {k}"),
        ));
    }
    let o = c / k;
    let mut out = Vec::with_capacity(r * o);
    for i in 0..r {
        out.extend(x.row_slice(i).chunks_exact(k).map(|w| w.iter().sum::<f64>()));
    }
    Tensor::new(r, o, out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let [r, c] = x.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = x.row_slice(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::new(r, c, out)
}

/// `log Σ exp(x)` of a row vector, returned as `1 × 1`.
pub fn log_sum_exp(x: &Tensor) -> Result<Tensor> {
    if x.rows() != 1 {
        return Err(Error::dim("log_sum_exp", format!("expected a row vector, got {}", x.shape_str())));
    }
    let max = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = x.data().iter().map(|v| (v - max).exp()).sum();
    Ok(Tensor::scalar(max + z.ln()))
}

/// Per-row statistics of a layer-norm forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_with_cache(x, gain, bias, eps).map(|(y, _)| y)
}

pub(crate) fn layer_norm_with_cache(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let [r, n] = x.shape();
    if n < 2 {
        return Err(Error::dim("layer_norm", format!("need at least 2 features, got {n}")));
    }
    if gain.shape() != [1, n] || bias.shape() != [1, n] {
        return Err(Error::dim(
            "layer_norm",
            format!(
                "gain {} / bias {} must be 1x{n}",
                gain.shape_str(),
                bias.shape_str()
            ),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
    }
    let mut normalized = Vec::with_capacity(r * n);
    let mut out = Vec::with_capacity(r * n);
    let mut inv_std = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row_slice(i);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        for (j, v) in row.iter().enumerate() {
            let xhat = (v - mean) * inv;
            normalized.push(xhat);
            out.push(gain.data()[j] * xhat + bias.data()[j]);
        }
    }
    Ok((
        Tensor::new(r, n, out)?,
        LayerNormCache {
            normalized: Tensor::new(r, n, normalized)?,
            inv_std,
        },
    ))
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("cosine_similarity", a, b)?;
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector(format!(
            "cosine similarity of a zero-norm vector (norms {na}, {nb})"
        )));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
