//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] owns every intermediate value. Operations append a node and
//! return a [`Var`] handle; [`Graph::backward`] walks the nodes in reverse
//! and returns the gradients of all trainable leaves, clearing the tape.
//!
//! Only two broadcasting patterns exist besides scalars: a full `[T, C]`
//! tensor against a `[1, C]` row vector (per-channel parameters) or a
//! `[T, 1]` column vector (per-token statistics).
//!
//! ```
//! use kvq::autodiff::Graph;
//! use kvq::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]));
//! let loss = g.sum_all(x);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```

pub mod check;
mod fake_quant;
mod kernels;

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::quant::{TokenQuantSpec, WeightQuantSpec};
use crate::tensor::{self, Tensor};

pub use fake_quant::SurrogateGrad;
pub use check::{gradcheck, GradCheck};
pub use kernels::{causal_softmax, nll_rows, rms_norm, rope, RopeSpec};
pub(crate) use kernels::sigmoid;

/// Smallest divisor magnitude accepted by [`Graph::div`].
pub const MIN_DIVISOR: f32 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Binary { kind: BinKind, a: Var, b: Var, bcast: Bcast },
    Scale(Var, f32),
    Abs(Var),
    Square(Var),
    Clamp { x: Var, lo: f32, hi: f32 },
    RoundSte(Var),
    Sigmoid(Var),
    Silu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f32> },
    Rope { x: Var, spec: RopeSpec },
    CausalSoftmax { x: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f32> },
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    MaxRows { x: Var, arg: Vec<usize> },
    FakeQuantWeight { w: Var, gamma: Var, beta: Var, spec: WeightQuantSpec, mode: SurrogateGrad },
    FakeQuantToken { x: Var, spec: TokenQuantSpec, mode: SurrogateGrad },
}

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Gradients of the trainable leaves reachable from a loss.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: impl Into<Arc<Tensor>>) -> Var {
        self.push_shared(t.into(), Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: impl Into<Arc<Tensor>>) -> Var {
        self.push_shared(t.into(), Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg)
    }

    fn bcast_of(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
        if a.shape() == b.shape() {
            Ok(Bcast::Same)
        } else if b.shape() == [1, a.cols()] && a.shape().len() == 2 {
            Ok(Bcast::Row)
        } else if b.shape() == [a.rows(), 1] && a.shape().len() == 2 {
            Ok(Bcast::Col)
        } else if b.is_scalar() {
            Ok(Bcast::Scalar)
        } else {
            Err(Error::shape(op, a.shape(), b.shape()))
        }
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let bcast = Self::bcast_of(name, ta, tb)?;
        if kind == BinKind::Div {
            if let Some(&bad) = tb.data().iter().find(|v| !(v.abs() >= MIN_DIVISOR)) {
                return Err(Error::DegenerateScale {
                    op: "div",
                    value: bad,
                    min: MIN_DIVISOR,
                });
            }
        }
        let cols = ta.cols();
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| {
                let y = bd[b_index(bcast, idx, cols)];
                match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                }
            })
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary { kind, a, b, bcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    /// Errors with [`Error::DegenerateScale`] if any divisor is below
    /// [`MIN_DIVISOR`] in magnitude.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f32::abs);
        let rg = self.rg(x);
        self.push(out, Op::Abs(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(out, Op::Square(x), rg)
    }

    /// Gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    /// Round half away from zero; straight-through in backward.
    pub fn round_ste(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f32::round);
        let rg = self.rg(x);
        self.push(out, Op::RoundSte(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        check_finite("silu", self.value(x))?;
        let out = self.value(x).map(|v| v * kernels::sigmoid(v));
        let rg = self.rg(x);
        Ok(self.push(out, Op::Silu(x), rg))
    }

    /// Root-mean-square normalization over channels with a `[1, C]` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f32) -> Result<Var> {
        let (out, inv_rms) = kernels::rms_norm(self.value(x), self.value(gain), eps)?;
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    pub fn rope(&mut self, x: Var, spec: RopeSpec) -> Result<Var> {
        let out = kernels::rope(self.value(x), &spec, false)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Rope { x, spec }, rg))
    }

    /// Row-wise softmax where query row `i` sees key columns `j <= offset + i`
    /// with `offset = cols - rows`.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let out = kernels::causal_softmax(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::CausalSoftmax { x }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.cols() || len == 0 {
            return Err(Error::shape("slice_cols", t.shape(), &[start, len]));
        }
        let out = t.slice_cols(start, len);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&ts)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&ts)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Gathers rows of `table` (`[V, C]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, c) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(Error::Contract("embedding of an empty sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary of {v}")));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_vec(ids.len(), c, data);
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean next-token negative log-likelihood of `targets` under `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rows() != targets.len() {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        check_finite("cross_entropy", t)?;
        let (nll, probs) = kernels::softmax_nll(t, targets)?;
        let out = Tensor::scalar((nll.iter().sum::<f64>() / nll.len() as f64) as f32);
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s as f32), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar((s / t.numel() as f64) as f32);
        let rg = self.rg(x);
        self.push(out, Op::MeanAll(x), rg)
    }

    /// Per-row (per-token) mean, `[T, C] -> [T, 1]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let data = (0..t.rows())
            .map(|r| (t.row(r).iter().map(|&v| v as f64).sum::<f64>() / c as f64) as f32)
            .collect();
        let out = Tensor::from_vec(t.rows(), 1, data);
        let rg = self.rg(x);
        self.push(out, Op::MeanRows(x), rg)
    }

    /// Per-row maximum, `[T, C] -> [T, 1]`; gradient goes to the first argmax.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut arg = Vec::with_capacity(t.rows());
        let mut data = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = t.row(r);
            let (i, &m) = row
                .iter()
                .enumerate()
                .fold((0, &row[0]), |best, cur| if cur.1 > best.1 { cur } else { best });
            arg.push(i);
            data.push(m);
        }
        let out = Tensor::from_vec(t.rows(), 1, data);
        let rg = self.rg(x);
        self.push(out, Op::MaxRows { x, arg }, rg)
    }

    /// Mean absolute error between `x` and a same-shape `target`.
    pub fn mae(&mut self, x: Var, target: Var) -> Result<Var> {
        let d = self.sub(x, target)?;
        let a = self.abs(d);
        Ok(self.mean_all(a))
    }

    /// Mean squared error between `x` and a same-shape `target`.
    pub fn mse(&mut self, x: Var, target: Var) -> Result<Var> {
        let d = self.sub(x, target)?;
        let a = self.square(d);
        Ok(self.mean_all(a))
    }

    /// Fake-quantizes a `[C_in, C_out]` weight with per-group clipping
    /// factors `gamma`, `beta` (`[groups, C_out]`, mapped values in `(0, 1]`).
    pub fn fake_quant_weight(
        &mut self,
        w: Var,
        gamma: Var,
        beta: Var,
        spec: WeightQuantSpec,
        mode: SurrogateGrad,
    ) -> Result<Var> {
        let out = fake_quant::weight_forward(
            self.value(w),
            self.value(gamma),
            self.value(beta),
            &spec,
        )?;
        let rg = self.rg(w) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::FakeQuantWeight {
                w,
                gamma,
                beta,
                spec,
                mode,
            },
            rg,
        ))
    }

    /// Fake-quantizes `[T, C]` activations token by token.
    pub fn fake_quant_token(
        &mut self,
        x: Var,
        spec: TokenQuantSpec,
        mode: SurrogateGrad,
    ) -> Result<Var> {
        spec.validate()?;
        check_finite("fake_quant_token", self.value(x))?;
        let out = fake_quant::token_forward(self.value(x), &spec);
        let rg = self.rg(x);
        Ok(self.push(out, Op::FakeQuantToken { x, spec, mode }, rg))
    }

    /// Back-propagates from the scalar `loss` and returns the gradients of
    /// every trainable leaf. The tape is cleared afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (input, contribution) in self.local_grads(idx, &g)? {
                if !self.rg(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| zeros_like(&node.value));
                out.grads.insert(Var(idx), g);
            }
        }
        self.nodes.clear();
        Ok(out)
    }

    /// Gradient contributions of node `idx` to each of its inputs.
    fn local_grads(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.value(v);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.rg(*a) {
                    out.push((*a, tensor::matmul_nt(g, val(*b))?));
                }
                if self.rg(*b) {
                    out.push((*b, tensor::matmul_tn(val(*a), g)?));
                }
                out
            }
            Op::MatMulNt(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.rg(*a) {
                    out.push((*a, tensor::matmul(g, val(*b))?));
                }
                if self.rg(*b) {
                    out.push((*b, tensor::matmul_tn(g, val(*a))?));
                }
                out
            }
            Op::Transpose(x) => vec![(*x, g.transpose())],
            Op::Binary { kind, a, b, bcast } => {
                binary_grads(*kind, *bcast, val(*a), val(*b), &node.value, g)
                    .into_iter()
                    .zip([*a, *b])
                    .map(|(t, v)| (v, t))
                    .collect()
            }
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * c))],
            Op::Abs(x) => vec![(*x, zip_map(g, val(*x), |g, x| g * sign(x)))],
            Op::Square(x) => vec![(*x, zip_map(g, val(*x), |g, x| 2.0 * g * x))],
            Op::Clamp { x, lo, hi } => vec![(
                *x,
                zip_map(g, val(*x), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 }),
            )],
            Op::RoundSte(x) => vec![(*x, g.clone())],
            Op::Sigmoid(x) => vec![(*x, zip_map(g, &node.value, |g, y| g * y * (1.0 - y)))],
            Op::Silu(x) => vec![(
                *x,
                zip_map(g, val(*x), |g, x| {
                    let s = kernels::sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                }),
            )],
            Op::RmsNorm { x, gain, inv_rms } => {
                let (dx, dg) = kernels::rms_norm_backward(val(*x), val(*gain), inv_rms, g);
                vec![(*x, dx), (*gain, dg)]
            }
            Op::Rope { x, spec } => vec![(*x, kernels::rope(g, spec, true)?)],
            Op::CausalSoftmax { x } => {
                vec![(*x, kernels::softmax_backward(&node.value, g))]
            }
            Op::SliceCols { x, start } => {
                let src = val(*x);
                let (r, c, len) = (src.rows(), src.cols(), g.cols());
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    out[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                vec![(*x, Tensor::from_vec(r, c, out))]
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = val(p).cols();
                        let piece = g.slice_cols(start, len);
                        start += len;
                        (p, piece)
                    })
                    .collect()
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = val(p).rows();
                        let piece = g.slice_rows(start, len);
                        start += len;
                        (p, piece)
                    })
                    .collect()
            }
            Op::Embedding { table, ids } => {
                let t = val(*table);
                let c = t.cols();
                let mut out = vec![0.0; t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &gv) in out[id * c..(id + 1) * c].iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                vec![(*table, Tensor::new(t.shape().to_vec(), out)?)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let t = val(*logits);
                let (rows, v) = (t.rows(), t.cols());
                let scale = g.item() / rows as f32;
                let mut out: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (r, &tgt) in targets.iter().enumerate() {
                    out[r * v + tgt] -= scale;
                }
                vec![(*logits, Tensor::from_vec(rows, v, out))]
            }
            Op::SumAll(x) => {
                let t = val(*x);
                vec![(*x, Tensor::new(t.shape().to_vec(), vec![g.item(); t.numel()])?)]
            }
            Op::MeanAll(x) => {
                let t = val(*x);
                let v = g.item() / t.numel() as f32;
                vec![(*x, Tensor::new(t.shape().to_vec(), vec![v; t.numel()])?)]
            }
            Op::MeanRows(x) => {
                let t = val(*x);
                let c = t.cols();
                let mut out = Vec::with_capacity(t.numel());
                for r in 0..t.rows() {
                    let v = g.data()[r] / c as f32;
                    out.extend(std::iter::repeat_n(v, c));
                }
                vec![(*x, Tensor::new(t.shape().to_vec(), out)?)]
            }
            Op::MaxRows { x, arg } => {
                let t = val(*x);
                let c = t.cols();
                let mut out = vec![0.0; t.numel()];
                for (r, &a) in arg.iter().enumerate() {
                    out[r * c + a] = g.data()[r];
                }
                vec![(*x, Tensor::new(t.shape().to_vec(), out)?)]
            }
            Op::FakeQuantWeight {
                w,
                gamma,
                beta,
                spec,
                mode,
            } => {
                let (dw, dgamma, dbeta) =
                    fake_quant::weight_backward(val(*w), val(*gamma), val(*beta), spec, *mode, g);
                vec![(*w, dw), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::FakeQuantToken { x, spec, mode } => {
                vec![(*x, fake_quant::token_backward(val(*x), spec, *mode, g))]
            }
        })
    }
}

#[inline]
fn b_index(bcast: Bcast, idx: usize, cols: usize) -> usize {
    match bcast {
        Bcast::Same => idx,
        Bcast::Row => idx % cols,
        Bcast::Col => idx / cols,
        Bcast::Scalar => 0,
    }
}

#[inline]
fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zeros_like(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), vec![0.0; t.numel()]).expect("shape already validated")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn binary_grads(
    kind: BinKind,
    bcast: Bcast,
    a: &Tensor,
    b: &Tensor,
    out: &Tensor,
    g: &Tensor,
) -> [Tensor; 2] {
    let cols = a.cols();
    let bd = b.data();
    let mut da = Vec::with_capacity(a.numel());
    let mut db = vec![0.0f32; b.numel()];
    for (idx, (&gv, &av)) in g.data().iter().zip(a.data()).enumerate() {
        let bi = b_index(bcast, idx, cols);
        let bv = bd[bi];
        let (ga, gb) = match kind {
            BinKind::Add => (gv, gv),
            BinKind::Sub => (gv, -gv),
            BinKind::Mul => (gv * bv, gv * av),
            BinKind::Div => (gv / bv, -gv * out.data()[idx] / bv),
        };
        da.push(ga);
        db[bi] += gb;
    }
    [
        Tensor::new(a.shape().to_vec(), da).expect("same shape"),
        Tensor::new(b.shape().to_vec(), db).expect("same shape"),
    ]
}

#[cfg(test)]
mod tests;
