//! The cross-block reconstruction loss over generic pipeline stages.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{block, BlockDims, LayerWeights};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mae,
    Mse,
}

impl LossKind {
    pub fn apply(&self, g: &mut Graph, x: Var, target: Var) -> Result<Var> {
        match self {
            LossKind::Mae => g.mae(x, target),
            LossKind::Mse => g.mse(x, target),
        }
    }
}

/// One step of a pipeline, recorded onto a graph.
pub trait Stage {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var>;
}

/// A full-precision decoder block whose weights are graph constants.
pub struct FpBlock<'a> {
    pub layer: &'a LayerWeights,
    pub dims: BlockDims,
}

impl Stage for FpBlock<'_> {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let p = self.layer.vars(g, false);
        let pr = block::project(g, x, &p, &self.dims)?;
        let (mut k, mut v) = (pr.k, pr.v);
        if self.layer.k_smooth.absorbed {
            k = crate::model::to_raw_var(g, k, &self.layer.k_smooth)?;
        }
        if self.layer.v_smooth.absorbed {
            v = crate::model::to_raw_var(g, v, &self.layer.v_smooth)?;
        }
        let a = block::attend(g, pr.q, k, v, &self.dims, true)?;
        block::finish(g, x, a, &p, &self.dims)
    }
}

/// Right-multiplication by a fixed matrix, plus an optional fixed
/// perturbation of the output. Used for closed-form checks of the loss.
pub struct LinearStage {
    pub w: Arc<Tensor>,
    pub perturbation: Option<Arc<Tensor>>,
}

impl Stage for LinearStage {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.constant(Arc::clone(&self.w));
        let y = g.matmul(x, w)?;
        match &self.perturbation {
            Some(e) => {
                let e = g.constant(Arc::clone(e));
                g.add(y, e)
            }
            None => Ok(y),
        }
    }
}

/// Number of blocks the loss spans for block `i` of `n` (0-based), with the
/// tail truncated.
pub fn effective_k(k: usize, i: usize, n: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::Config("cross-block depth k must be at least 1".into()));
    }
    if i >= n {
        return Err(Error::Contract(format!("block {i} out of range for {n} blocks")));
    }
    Ok(k.min(n - i))
}

/// Runs `x` through `stages` in order.
pub fn chain(g: &mut Graph, x: Var, stages: &[&dyn Stage]) -> Result<Var> {
    stages.iter().try_fold(x, |y, s| s.forward(g, y))
}

/// Reconstruction loss of the quantized branch against a precomputed
/// full-precision output: `quantized` followed by `tail`.
pub fn crr_from_target(
    g: &mut Graph,
    x: Var,
    quantized: &dyn Stage,
    tail: &[&dyn Stage],
    target: Var,
    loss: LossKind,
) -> Result<Var> {
    let y = quantized.forward(g, x)?;
    let y = chain(g, y, tail)?;
    loss.apply(g, y, target)
}

/// Cross-block reconstruction loss for the first stage of `fp`.
///
/// Both branches start from the same `x`. The quantized branch replaces
/// `fp[0]` with `quantized`; the next `k - 1` stages are the shared
/// full-precision ones. `k` is truncated at the end of `fp`.
pub fn crr_loss(
    g: &mut Graph,
    x: Var,
    quantized: &dyn Stage,
    fp: &[&dyn Stage],
    k: usize,
    loss: LossKind,
) -> Result<Var> {
    if fp.is_empty() {
        return Err(Error::Contract("crr_loss needs at least one full-precision stage".into()));
    }
    let k = effective_k(k, 0, fp.len())?;
    let target = chain(g, x, &fp[..k])?;
    crr_from_target(g, x, quantized, &fp[1..k], target, loss)
}
