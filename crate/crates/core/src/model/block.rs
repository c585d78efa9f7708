//! The decoder block written once against the autodiff graph, so inference,
//! calibration and fitting share the exact same arithmetic.
//!
//! A block is split at the attention so callers can decide how keys and
//! values reach it (straight through, via the cache, or fake-quantized).

use crate::autodiff::{Graph, RopeSpec, SurrogateGrad, Var};
use crate::error::Result;
use crate::quant::TokenQuantSpec;

use super::config::ModelConfig;

/// Graph handles of one block's weights.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub mlp_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

impl BlockVars {
    /// Handles in [`super::LayerWeights::named`] order.
    pub fn all(&self) -> [Var; 11] {
        [
            self.attn_norm,
            self.wq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.mlp_norm,
            self.w_gate,
            self.w_up,
            self.w_down,
        ]
    }
}

/// Shape constants and the optional per-token quantizer for linear inputs.
#[derive(Clone, Copy, Debug)]
pub struct BlockDims {
    pub n_heads: usize,
    pub head_dim: usize,
    pub rope_base: f32,
    pub norm_eps: f32,
    pub act_bits: Option<u32>,
}

impl BlockDims {
    pub fn of(cfg: &ModelConfig) -> Self {
        BlockDims {
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim,
            rope_base: cfg.rope_base,
            norm_eps: cfg.norm_eps,
            act_bits: cfg.act_spec(cfg.hidden_size).map(|s| s.bits),
        }
    }

    pub fn rope(&self, start: usize) -> RopeSpec {
        RopeSpec {
            start,
            head_dim: self.head_dim,
            base: self.rope_base,
        }
    }

    fn act(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.act_bits {
            Some(bits) => {
                let cols = g.value(x).cols();
                let spec = TokenQuantSpec {
                    bits,
                    group_size: cols,
                    scheme: crate::quant::TokenScheme::Absmax,
                };
                g.fake_quant_token(x, spec, SurrogateGrad::Ste)
            }
            None => Ok(x),
        }
    }
}

/// Output of the pre-attention half of a block.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    /// Queries before the rotary embedding.
    pub q: Var,
    /// Key and value projection outputs (smoothed space if smoothing has
    /// been absorbed into the projections).
    pub k: Var,
    pub v: Var,
}

pub fn project(g: &mut Graph, x: Var, p: &BlockVars, dims: &BlockDims) -> Result<Projections> {
    let h = g.rms_norm(x, p.attn_norm, dims.norm_eps)?;
    let h = dims.act(g, h)?;
    let q = g.matmul(h, p.wq)?;
    let k = g.matmul(h, p.wk)?;
    let k = g.add(k, p.bk)?;
    let v = g.matmul(h, p.wv)?;
    let v = g.add(v, p.bv)?;
    Ok(Projections { q, k, v })
}

/// Multi-head causal attention of `T` new queries over `P + T` keys.
///
/// `q` is `[T, C]` before rotation; it is rotated at positions `P..P+T`.
/// If `rotate_keys` is set, `k` is `[P+T, C]` before rotation and is rotated
/// at positions `0..P+T`; otherwise it is already rotated.
pub fn attend(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    dims: &BlockDims,
    rotate_keys: bool,
) -> Result<Var> {
    let (t, total) = (g.value(q).rows(), g.value(k).rows());
    let past = total.checked_sub(t).ok_or_else(|| {
        crate::error::Error::shape("attend", g.value(q).shape(), g.value(k).shape())
    })?;
    let q = g.rope(q, dims.rope(past))?;
    let k = if rotate_keys { g.rope(k, dims.rope(0))? } else { k };
    let d = dims.head_dim;
    let scale = 1.0 / (d as f32).sqrt();
    let mut heads = Vec::with_capacity(dims.n_heads);
    for h in 0..dims.n_heads {
        let qh = g.slice_cols(q, h * d, d)?;
        let kh = g.slice_cols(k, h * d, d)?;
        let vh = g.slice_cols(v, h * d, d)?;
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, scale);
        let p = g.causal_softmax(s)?;
        heads.push(g.matmul(p, vh)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        g.concat_cols(&heads)
    }
}

/// Output projection, residual, and the gated MLP.
pub fn finish(g: &mut Graph, x: Var, attn: Var, p: &BlockVars, dims: &BlockDims) -> Result<Var> {
    let attn = dims.act(g, attn)?;
    let o = g.matmul(attn, p.wo)?;
    let x = g.add(x, o)?;
    let h = g.rms_norm(x, p.mlp_norm, dims.norm_eps)?;
    let h = dims.act(g, h)?;
    let gate = g.matmul(h, p.w_gate)?;
    let gate = g.silu(gate)?;
    let up = g.matmul(h, p.w_up)?;
    let m = g.mul(gate, up)?;
    let m = dims.act(g, m)?;
    let down = g.matmul(m, p.w_down)?;
    g.add(x, down)
}

/// A block whose keys and values go straight into attention in raw space.
pub fn forward_plain(g: &mut Graph, x: Var, p: &BlockVars, dims: &BlockDims) -> Result<Var> {
    let pr = project(g, x, p, dims)?;
    let a = attend(g, pr.q, pr.k, pr.v, dims, true)?;
    finish(g, x, a, p, dims)
}
