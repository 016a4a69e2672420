//! Append-only compute graph with reverse-mode gradients.
//!
//! Nodes are pushed in evaluation order, so a node's inputs always precede
//! it. [`Graph::backward`] walks the nodes once in reverse append order.

use std::collections::BTreeMap;

use super::ops::{self, LayerNormCache};
use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { x: NodeId, scale: f64 },
    SumPool { x: NodeId, k: usize },
    Softmax(NodeId),
    LogSumExp(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        cache: LayerNormCache,
    },
    Cosine {
        a: NodeId,
        b: NodeId,
        norm_a: f64,
        norm_b: f64,
    },
    Select { x: NodeId, index: usize },
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    LogClamped { x: NodeId, floor: f64 },
    SignedSqrt { x: NodeId, eps: f64 },
    L2Normalize { x: NodeId, norm: f64 },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::SumPool { .. } => "sum_pool",
            Op::Softmax(_) => "softmax",
            Op::LogSumExp(_) => "log_sum_exp",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Cosine { .. } => "cosine",
            Op::Select { .. } => "select",
            Op::ConcatCols(_) => "concat_cols",
            Op::Sum(_) => "sum",
            Op::LogClamped { .. } => "log",
            Op::SignedSqrt { .. } => "signed_sqrt",
            Op::L2Normalize { .. } => "l2_normalize",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// A recorded forward computation. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.tag()));
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value)
    }

    /// The leaf for a parameter path; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, path: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(path) {
            return Ok(id);
        }
        let id = self.push(Op::Leaf, store.get(path)?.clone())?;
        self.params.insert(path.to_string(), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        self.push(Op::MatMul(a, b), v)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul_nt(self.value(a), self.value(b))?;
        self.push(Op::MatMulNt(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::add(self.value(a), self.value(b))?;
        self.push(Op::Add(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::hadamard(self.value(a), self.value(b))?;
        self.push(Op::Mul(a, b), v)
    }

    /// `scale · x + shift`, element-wise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let v = self.value(x).map(|t| scale * t + shift);
        self.push(Op::Affine { x, scale }, v)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.affine(x, factor, 0.0)
    }

    pub fn sum_pool(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let v = ops::sum_pool(self.value(x), k)?;
        self.push(Op::SumPool { x, k }, v)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).is_empty() {
            return Err(Error::dim("softmax", "empty input"));
        }
        let v = ops::softmax(self.value(x))?;
        self.push(Op::Softmax(x), v)
    }

    pub fn log_sum_exp(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::log_sum_exp(self.value(x))?;
        self.push(Op::LogSumExp(x), v)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (v, cache) =
            ops::layer_norm_with_cache(self.value(x), self.value(gain), self.value(bias), eps)?;
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
            v,
        )
    }

    /// Cosine similarity of two row vectors as a `1 × 1` node.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != 1 {
            return Err(Error::dim("cosine", format!("expected row vectors, got {}", va.shape_str())));
        }
        let c = ops::cosine_similarity(va, vb)?;
        let (norm_a, norm_b) = (va.norm(), vb.norm());
        self.push(Op::Cosine { a, b, norm_a, norm_b }, Tensor::scalar(c))
    }

    /// Flat element `index` as a `1 × 1` node.
    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let v = self.value(x);
        if index >= v.len() {
            return Err(Error::dim("select", format!("index {index} out of range for {}", v.shape_str())));
        }
        let s = Tensor::scalar(v.data()[index]);
        self.push(Op::Select { x, index }, s)
    }

    /// Horizontal concatenation of single-row nodes.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols", "nothing to concatenate"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rows() != 1 {
                return Err(Error::dim("concat_cols", format!("part has shape {}", v.shape_str())));
            }
            data.extend_from_slice(v.data());
        }
        let v = Tensor::row(data)?;
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Mean of `1 × 1` nodes.
    pub fn mean_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let row = self.concat_cols(parts)?;
        let s = self.sum(row)?;
        self.scale(s, 1.0 / parts.len() as f64)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        let v = self.value(x).map(|t| t.max(floor).ln());
        self.push(Op::LogClamped { x, floor }, v)
    }

    /// `sign(x)·(sqrt(|x| + eps) − sqrt(eps))`, a smooth power normalization.
    pub fn signed_sqrt(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let root_eps = eps.sqrt();
        let v = self
            .value(x)
            .map(|t| t.signum() * ((t.abs() + eps).sqrt() - root_eps));
        self.push(Op::SignedSqrt { x, eps }, v)
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let norm = self.value(x).norm();
        if norm == 0.0 {
            return Err(Error::DegenerateVector("l2 normalization of a zero vector".into()));
        }
        let v = self.value(x).map(|t| t / norm);
        self.push(Op::L2Normalize { x, norm }, v)
    }

    /// Gradient of the scalar `loss` with respect to every tensor in `store`.
    /// Parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: NodeId, store: &ParamStore) -> Result<Gradients> {
        if self.value(loss).shape() != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} has shape {}",
                loss.0,
                self.value(loss).shape_str()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut out = Gradients::zeros_like(store);
        for (path, id) in &self.params {
            let slot = out.get_mut(path).ok_or_else(|| {
                Error::Integrity(format!("graph parameter `{path}` is not in the store"))
            })?;
            if let Some(g) = &grads[id.0] {
                slot.add_assign(g);
            }
        }
        Ok(out)
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = ops::matmul_nt(g, val(*b))?;
                let db = ops::matmul(&val(*a).transpose(), g)?;
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MatMulNt(a, b) => {
                let da = ops::matmul(g, val(*b))?;
                let db = ops::matmul(&g.transpose(), val(*a))?;
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, ops::hadamard(g, val(*b))?);
                accumulate(grads, *b, ops::hadamard(g, val(*a))?);
            }
            Op::Affine { x, scale } => accumulate(grads, *x, g.map(|t| t * scale)),
            Op::SumPool { x, k } => {
                let [r, c] = val(*x).shape();
                let o = c / k;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..o {
                        let gj = g.data()[i * o + j];
                        for t in 0..*k {
                            d[i * c + j * k + t] = gj;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(r, c, d)?);
            }
            Op::Softmax(x) => {
                let [r, c] = out.shape();
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let y = out.row_slice(i);
                    let gy = g.row_slice(i);
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    d.extend(y.iter().zip(gy).map(|(yv, gv)| yv * (gv - dot)));
                }
                accumulate(grads, *x, Tensor::new(r, c, d)?);
            }
            Op::LogSumExp(x) => {
                let w = ops::softmax(val(*x))?;
                let gs = g.data()[0];
                accumulate(grads, *x, w.map(|t| t * gs));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            } => {
                let [r, n] = out.shape();
                let gv = val(*gain).data();
                let mut dx = Vec::with_capacity(r * n);
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let nf = n as f64;
                for i in 0..r {
                    let xhat = cache.normalized.row_slice(i);
                    let gy = g.row_slice(i);
                    let inv = cache.inv_std[i];
                    let dxhat: Vec<f64> = gy.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx.push(inv / nf * (nf * dxhat[j] - sum_d - xhat[j] * sum_dx));
                        dgain[j] += gy[j] * xhat[j];
                        dbias[j] += gy[j];
                    }
                }
                accumulate(grads, *x, Tensor::new(r, n, dx)?);
                accumulate(grads, *gain, Tensor::row(dgain)?);
                accumulate(grads, *bias, Tensor::row(dbias)?);
            }
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            } => {
                let gs = g.data()[0];
                let c = out.data()[0];
                let (va, vb) = (val(*a), val(*b));
                let denom = norm_a * norm_b;
                let da: Vec<f64> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| gs * (y / denom - c * x / (norm_a * norm_a)))
                    .collect();
                let db: Vec<f64> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| gs * (x / denom - c * y / (norm_b * norm_b)))
                    .collect();
                accumulate(grads, *a, Tensor::new(va.rows(), va.cols(), da)?);
                accumulate(grads, *b, Tensor::new(vb.rows(), vb.cols(), db)?);
            }
            Op::Select { x, index } => {
                let [r, c] = val(*x).shape();
                let mut d = Tensor::zeros(r, c);
                d.data_mut()[*index] = g.data()[0];
                accumulate(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).cols();
                    accumulate(grads, p, Tensor::row(g.data()[offset..offset + n].to_vec())?);
                    offset += n;
                }
            }
            Op::Sum(x) => {
                let [r, c] = val(*x).shape();
                accumulate(grads, *x, Tensor::filled(r, c, g.data()[0]));
            }
            Op::LogClamped { x, floor } => {
                let xv = val(*x);
                let d: Vec<f64> = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(t, gv)| if *t > *floor { gv / t } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Tensor::new(xv.rows(), xv.cols(), d)?);
            }
            Op::SignedSqrt { x, eps } => {
                let xv = val(*x);
                let d: Vec<f64> = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(t, gv)| gv / (2.0 * (t.abs() + eps).sqrt()))
                    .collect();
                accumulate(grads, *x, Tensor::new(xv.rows(), xv.cols(), d)?);
            }
            Op::L2Normalize { x, norm } => {
                let dot: f64 = out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                let d = Tensor::new(
                    out.rows(),
                    out.cols(),
                    out.data()
                        .iter()
                        .zip(g.data())
                        .map(|(y, gv)| (gv - y * dot) / norm)
                        .collect(),
                )?;
                accumulate(grads, *x, d);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
