//! Learnable quantization parameters of one block and the block's
//! fake-quantized forward pass.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, RopeSpec, SurrogateGrad, Var};
use crate::error::Result;
use crate::model::{block, BlockDims, BlockVars, ClipParams, LayerWeights, LINEARS};
use crate::quant::{
    quantize_token, quantize_weight, SmoothingParams, TokenQuantSpec, TokenScheme, WeightQuantSpec,
    MIN_SCALE,
};
use crate::tensor::Tensor;

use super::stage::Stage;

/// Raw (unconstrained) learnable parameters of one block.
///
/// Smoothing scales are used as `max(s, MIN_SCALE)`; clipping factors are
/// stored before the sigmoid and are `[groups, C_out]` per projection, in
/// [`LINEARS`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub k_s: Tensor,
    pub k_delta: Tensor,
    pub v_s: Tensor,
    pub v_delta: Tensor,
    pub clip_raw: Option<Vec<(Tensor, Tensor)>>,
}

impl BlockParams {
    /// Identity smoothing and no clipping: plain round-to-nearest.
    pub fn identity(channels: usize) -> Self {
        BlockParams {
            k_s: Tensor::full(1, channels, 1.0),
            k_delta: Tensor::zeros(1, channels),
            v_s: Tensor::full(1, channels, 1.0),
            v_delta: Tensor::zeros(1, channels),
            clip_raw: None,
        }
    }

    pub fn with_smoothing(mut self, k: &SmoothingParams, v: &SmoothingParams) -> Self {
        self.k_s = Tensor::row_vector(k.s.clone());
        self.k_delta = Tensor::row_vector(k.delta.clone());
        self.v_s = Tensor::row_vector(v.s.clone());
        self.v_delta = Tensor::row_vector(v.delta.clone());
        self
    }

    /// Adds clipping factors at the raw value `raw` for every projection.
    pub fn with_clipping(mut self, layer: &LayerWeights, spec: &WeightQuantSpec, raw: f32) -> Self {
        self.clip_raw = Some(
            LINEARS
                .iter()
                .map(|name| {
                    let w = layer.linear(name).expect("known projection");
                    let t = Tensor::full(spec.groups(w.rows()), w.cols(), raw);
                    (t.clone(), t)
                })
                .collect(),
        );
        self
    }

    pub fn smoothing(&self) -> (SmoothingParams, SmoothingParams) {
        let mk = |s: &Tensor, d: &Tensor| SmoothingParams {
            s: s.data().iter().map(|&v| v.max(MIN_SCALE)).collect(),
            delta: d.data().to_vec(),
            absorbed: false,
        };
        (mk(&self.k_s, &self.k_delta), mk(&self.v_s, &self.v_delta))
    }

    /// Mapped clipping factors per projection name.
    pub fn clip(&self) -> Option<BTreeMap<String, ClipParams>> {
        self.clip_raw.as_ref().map(|c| {
            LINEARS
                .iter()
                .zip(c)
                .map(|(name, (g, b))| {
                    (
                        name.to_string(),
                        ClipParams {
                            gamma: g.map(sigmoid),
                            beta: b.map(sigmoid),
                        },
                    )
                })
                .collect()
        })
    }

    pub fn summary(&self) -> ParamSummary {
        let range = |ts: &[&Tensor], f: &dyn Fn(f32) -> f32| {
            ts.iter().flat_map(|t| t.data()).fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                let v = f(v);
                (lo.min(v), hi.max(v))
            })
        };
        let id = |v: f32| v;
        let (s_min, s_max) = range(&[&self.k_s, &self.v_s], &|v| v.max(MIN_SCALE));
        let (delta_min, delta_max) = range(&[&self.k_delta, &self.v_delta], &id);
        let (gamma, beta) = match &self.clip_raw {
            Some(c) => {
                let gs: Vec<&Tensor> = c.iter().map(|(g, _)| g).collect();
                let bs: Vec<&Tensor> = c.iter().map(|(_, b)| b).collect();
                (range(&gs, &sigmoid), range(&bs, &sigmoid))
            }
            None => ((1.0, 1.0), (1.0, 1.0)),
        };
        ParamSummary {
            s_min,
            s_max,
            delta_min,
            delta_max,
            gamma_min: gamma.0,
            gamma_max: gamma.1,
            beta_min: beta.0,
            beta_max: beta.1,
        }
    }

    /// Learnable tensors in optimizer-slot order: the four smoothing tensors
    /// (when `smoothing` is set) followed by the clipping pairs.
    pub(crate) fn slots_mut(&mut self, smoothing: bool) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if smoothing {
            out.extend([&mut self.k_s, &mut self.k_delta, &mut self.v_s, &mut self.v_delta]);
        }
        if let Some(c) = &mut self.clip_raw {
            for (g, b) in c {
                out.push(g);
                out.push(b);
            }
        }
        out
    }
}

/// Ranges of the learned parameters, in their mapped form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub s_min: f32,
    pub s_max: f32,
    pub delta_min: f32,
    pub delta_max: f32,
    pub gamma_min: f32,
    pub gamma_max: f32,
    pub beta_min: f32,
    pub beta_max: f32,
}

/// Static settings of a fake-quantized block.
#[derive(Clone, Copy, Debug)]
pub struct QuantSettings {
    pub dims: BlockDims,
    /// `None` leaves the weights unquantized.
    pub weight: Option<WeightQuantSpec>,
    /// `None` leaves keys and values unquantized.
    pub kv: Option<TokenQuantSpec>,
    pub post_rotary: bool,
    /// Whether the smoothing parameters take part at all.
    pub smoothing: bool,
    pub surrogate: SurrogateGrad,
}

/// Inputs of one fake-quantizer, kept to read back integer codes.
#[derive(Clone, Copy, Debug)]
enum Probe {
    Weight { w: Var, gamma: Var, beta: Var, spec: WeightQuantSpec },
    Token { x: Var, spec: TokenQuantSpec },
}

/// Per `(row, group)`, the position of the element that sets the scale.
fn token_extremes(t: &Tensor, spec: &TokenQuantSpec) -> Vec<i32> {
    let mut out = Vec::new();
    for r in 0..t.rows() {
        for grp in t.row(r).chunks(spec.group_size) {
            let m = match spec.scheme {
                TokenScheme::Shifted => grp.iter().map(|&v| v as f64).sum::<f64>() / grp.len() as f64,
                TokenScheme::Absmax => 0.0,
            };
            let (i, _) = grp.iter().enumerate().fold((0, -1.0f64), |best, (i, &v)| {
                let d = (v as f64 - m).abs();
                if d > best.1 {
                    (i, d)
                } else {
                    best
                }
            });
            out.push(i as i32);
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Smooth {
    s: Var,
    delta: Var,
}

/// A block with fake-quantized weights and K/V, registered on one graph.
pub struct QuantBlock<'a> {
    layer: &'a LayerWeights,
    set: QuantSettings,
    k: Option<Smooth>,
    v: Option<Smooth>,
    clip: Option<Vec<(Var, Var)>>,
    leaves: Vec<Var>,
    probes: RefCell<Vec<Probe>>,
}

impl<'a> QuantBlock<'a> {
    /// Registers `params` on `g`, as trainable leaves if `trainable`.
    pub fn register(
        g: &mut Graph,
        layer: &'a LayerWeights,
        params: &BlockParams,
        set: QuantSettings,
        trainable: bool,
    ) -> Self {
        let mut leaves = Vec::new();
        let mut leaf = |g: &mut Graph, t: &Tensor| {
            let v = if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            };
            leaves.push(v);
            v
        };
        let (k, v) = if set.smoothing {
            let mut smooth = |g: &mut Graph, s: &Tensor, d: &Tensor| {
                let raw = leaf(g, s);
                let delta = leaf(g, d);
                Smooth {
                    s: g.clamp(raw, MIN_SCALE, f32::MAX),
                    delta,
                }
            };
            let k = smooth(g, &params.k_s, &params.k_delta);
            let v = smooth(g, &params.v_s, &params.v_delta);
            (Some(k), Some(v))
        } else {
            (None, None)
        };
        let clip = params.clip_raw.as_ref().map(|c| {
            c.iter()
                .map(|(gr, br)| {
                    let gv = leaf(g, gr);
                    let bv = leaf(g, br);
                    (g.sigmoid(gv), g.sigmoid(bv))
                })
                .collect()
        });
        QuantBlock {
            layer,
            set,
            k,
            v,
            clip,
            leaves,
            probes: RefCell::new(Vec::new()),
        }
    }

    /// Integer codes of every quantizer evaluated by [`Stage::forward`] so
    /// far, in evaluation order, followed for token quantizers by the index
    /// of each group's extreme element. A change in any of them marks a
    /// kink between two evaluations.
    pub fn codes(&self, g: &Graph) -> Result<Vec<i32>> {
        let mut out = Vec::new();
        for p in self.probes.borrow().iter() {
            match *p {
                Probe::Weight { w, gamma, beta, spec } => {
                    let q = quantize_weight(g.value(w), &spec, Some((g.value(gamma), g.value(beta))))?;
                    out.extend(q.codes.iter().map(|&c| c as i32));
                }
                Probe::Token { x, spec } => {
                    let t = g.value(x);
                    let q = quantize_token(t, &spec)?;
                    out.extend(q.codes.iter().map(|&c| c as i32));
                    out.extend(token_extremes(t, &spec));
                }
            }
        }
        Ok(out)
    }

    /// Leaves in optimizer-slot order (see [`BlockParams::slots_mut`]).
    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    fn fake_weight(&self, g: &mut Graph, idx: usize, w: Var) -> Result<Var> {
        let Some(spec) = self.set.weight else {
            return Ok(w);
        };
        let (gamma, beta) = match &self.clip {
            Some(c) => c[idx],
            None => {
                let t = g.value(w);
                let ones = Tensor::full(spec.groups(t.rows()), t.cols(), 1.0);
                let gamma = g.constant(ones);
                (gamma, gamma)
            }
        };
        self.probes.borrow_mut().push(Probe::Weight { w, gamma, beta, spec });
        g.fake_quant_weight(w, gamma, beta, spec, self.set.surrogate)
    }

    /// `W / s` and `(B - delta) / s`.
    fn smoothed_projection(
        g: &mut Graph,
        w: &Arc<Tensor>,
        b: &Arc<Tensor>,
        sm: Option<Smooth>,
    ) -> Result<(Var, Var)> {
        let w = g.constant(Arc::clone(w));
        let b = g.constant(Arc::clone(b));
        match sm {
            Some(sm) => {
                let wt = g.div(w, sm.s)?;
                let shifted = g.sub(b, sm.delta)?;
                let bt = g.div(shifted, sm.s)?;
                Ok((wt, bt))
            }
            None => Ok((w, b)),
        }
    }

    /// Smoothed projection output to the raw-space tensor attention sees.
    fn kv_path(&self, g: &mut Graph, y: Var, sm: Option<Smooth>, rope: Option<RopeSpec>) -> Result<Var> {
        let to_raw = |g: &mut Graph, y: Var| -> Result<Var> {
            match sm {
                Some(sm) => {
                    let y = g.mul(y, sm.s)?;
                    g.add(y, sm.delta)
                }
                None => Ok(y),
            }
        };
        let mut y = y;
        if let Some(spec) = rope {
            let raw = to_raw(g, y)?;
            let rot = g.rope(raw, spec)?;
            y = match sm {
                Some(sm) => {
                    let shifted = g.sub(rot, sm.delta)?;
                    g.div(shifted, sm.s)?
                }
                None => rot,
            };
        }
        if let Some(spec) = self.set.kv {
            self.probes.borrow_mut().push(Probe::Token { x: y, spec });
            y = g.fake_quant_token(y, spec, self.set.surrogate)?;
        }
        to_raw(g, y)
    }
}

impl Stage for QuantBlock<'_> {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let l = self.layer;
        let (wk, bk) = Self::smoothed_projection(g, &l.wk, &l.bk, self.k)?;
        let (wv, bv) = Self::smoothed_projection(g, &l.wv, &l.bv, self.v)?;
        let w = |g: &mut Graph, idx: usize, t: &Arc<Tensor>| -> Result<Var> {
            let v = g.constant(Arc::clone(t));
            self.fake_weight(g, idx, v)
        };
        let wq = w(g, 0, &l.wq)?;
        let wo = w(g, 3, &l.wo)?;
        let w_gate = w(g, 4, &l.w_gate)?;
        let w_up = w(g, 5, &l.w_up)?;
        let w_down = w(g, 6, &l.w_down)?;
        let p = BlockVars {
            attn_norm: g.constant(Arc::clone(&l.attn_norm)),
            wq,
            wk: self.fake_weight(g, 1, wk)?,
            bk,
            wv: self.fake_weight(g, 2, wv)?,
            bv,
            wo,
            mlp_norm: g.constant(Arc::clone(&l.mlp_norm)),
            w_gate,
            w_up,
            w_down,
        };
        let dims = &self.set.dims;
        let pr = block::project(g, x, &p, dims)?;
        let rope = self.set.post_rotary.then(|| dims.rope(0));
        let k = self.kv_path(g, pr.k, self.k, rope)?;
        let v = self.kv_path(g, pr.v, self.v, None)?;
        let a = block::attend(g, pr.q, k, v, dims, !self.set.post_rotary)?;
        block::finish(g, x, a, &p, dims)
    }
}

/// An already frozen (absorbed, dequantized) block whose K/V are
/// fake-quantized the way calibration sees them.
pub struct FrozenBlock<'a> {
    pub layer: &'a LayerWeights,
    pub dims: BlockDims,
    pub kv: Option<TokenQuantSpec>,
    pub post_rotary: bool,
}

impl Stage for FrozenBlock<'_> {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let l = self.layer;
        let p = l.vars(g, false);
        let pr = block::project(g, x, &p, &self.dims)?;
        let path = |g: &mut Graph, y: Var, sp: &SmoothingParams, rope: Option<RopeSpec>| -> Result<Var> {
            let mut y = y;
            if let Some(spec) = rope {
                let raw = crate::model::to_raw_var(g, y, sp)?;
                let rot = g.rope(raw, spec)?;
                let s = g.constant(Tensor::row_vector(sp.s.clone()));
                let d = g.constant(Tensor::row_vector(sp.delta.clone()));
                let shifted = g.sub(rot, d)?;
                y = g.div(shifted, s)?;
            }
            if let Some(spec) = self.kv {
                y = g.fake_quant_token(y, spec, SurrogateGrad::Ste)?;
            }
            crate::model::to_raw_var(g, y, sp)
        };
        let rope = self.post_rotary.then(|| self.dims.rope(0));
        let k = path(g, pr.k, &l.k_smooth, rope)?;
        let v = path(g, pr.v, &l.v_smooth, None)?;
        let a = block::attend(g, pr.q, k, v, &self.dims, !self.post_rotary)?;
        block::finish(g, x, a, &p, &self.dims)
    }
}
