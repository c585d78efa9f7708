//! Forward/backward kernels for the transformer primitives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[inline]
pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Returns the normalized tensor and the per-row `1 / rms`.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<(Tensor, Vec<f32>)> {
    let c = x.cols();
    if gain.shape() != [1, c] {
        return Err(Error::shape("rms_norm", x.shape(), gain.shape()));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite { op: "rms_norm" });
    }
    let g = gain.data();
    let mut inv = Vec::with_capacity(x.rows());
    let mut out = Vec::with_capacity(x.numel());
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / c as f64;
        let ir = (1.0 / (ms + eps as f64).sqrt()) as f32;
        inv.push(ir);
        out.extend(row.iter().zip(g).map(|(&v, &gv)| v * ir * gv));
    }
    Ok((Tensor::from_vec(x.rows(), c, out), inv))
}

pub(crate) fn rms_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    inv_rms: &[f32],
    dy: &Tensor,
) -> (Tensor, Tensor) {
    let c = x.cols();
    let g = gain.data();
    let mut dx = Vec::with_capacity(x.numel());
    let mut dg = vec![0.0f32; c];
    for (r, &ir) in inv_rms.iter().enumerate() {
        let (xr, dyr) = (x.row(r), dy.row(r));
        let mut dot = 0.0f64;
        for j in 0..c {
            dot += (g[j] * dyr[j] * xr[j]) as f64;
            dg[j] += dyr[j] * xr[j] * ir;
        }
        let coef = (dot / c as f64) as f32 * ir * ir * ir;
        dx.extend((0..c).map(|j| ir * g[j] * dyr[j] - coef * xr[j]));
    }
    (
        Tensor::from_vec(x.rows(), c, dx),
        Tensor::from_vec(1, c, dg),
    )
}

/// Rotary embedding of `[T, heads * head_dim]` rows at positions
/// `start..start + T`. Channel `j` of each head is paired with
/// `j + head_dim / 2` and rotated by `pos * base^(-2j / head_dim)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeSpec {
    pub start: usize,
    pub head_dim: usize,
    pub base: f32,
}

/// Applies the rotation (or its inverse, which is the backward pass).
pub fn rope(x: &Tensor, spec: &RopeSpec, inverse: bool) -> Result<Tensor> {
    let (t, c) = (x.rows(), x.cols());
    let d = spec.head_dim;
    if d == 0 || d % 2 != 0 || c % d != 0 {
        return Err(Error::shape("rope", x.shape(), &[d]));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite { op: "rope" });
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| (spec.base as f64).powf(-2.0 * j as f64 / d as f64))
        .collect();
    let mut out = x.data().to_vec();
    let mut cs = vec![(0.0f32, 0.0f32); half];
    for r in 0..t {
        let pos = (spec.start + r) as f64;
        for (j, slot) in cs.iter_mut().enumerate() {
            let (s, co) = (pos * freqs[j]).sin_cos();
            *slot = (co as f32, if inverse { -s as f32 } else { s as f32 });
        }
        let row = &mut out[r * c..(r + 1) * c];
        for head in row.chunks_mut(d) {
            let (a, b) = head.split_at_mut(half);
            for j in 0..half {
                let (co, s) = cs[j];
                let (x1, x2) = (a[j], b[j]);
                a[j] = x1 * co - x2 * s;
                b[j] = x1 * s + x2 * co;
            }
        }
    }
    Ok(Tensor::from_vec(t, c, out))
}

/// Softmax over each row of `[Tq, Tk]` scores, where query `i` sees keys
/// `j <= (Tk - Tq) + i`. Masked entries are exactly zero.
pub fn causal_softmax(x: &Tensor) -> Result<Tensor> {
    let (tq, tk) = (x.rows(), x.cols());
    if tk < tq {
        return Err(Error::shape("causal_softmax", x.shape(), &[tq, tq]));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite { op: "causal_softmax" });
    }
    let offset = tk - tq;
    let mut out = vec![0.0f32; tq * tk];
    for i in 0..tq {
        let visible = offset + i + 1;
        let row = &x.row(i)[..visible];
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let dst = &mut out[i * tk..i * tk + visible];
        let mut sum = 0.0f32;
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in dst {
            *o /= sum;
        }
    }
    Ok(Tensor::from_vec(tq, tk, out))
}

pub(crate) fn softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let c = y.cols();
    let mut out = Vec::with_capacity(y.numel());
    for r in 0..y.rows() {
        let (yr, dr) = (y.row(r), dy.row(r));
        let dot: f32 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
        out.extend(yr.iter().zip(dr).map(|(&yv, &dv)| yv * (dv - dot)));
    }
    Tensor::from_vec(y.rows(), c, out)
}

/// Per-row negative log-likelihood of `targets` and the full softmax.
pub(crate) fn softmax_nll(logits: &Tensor, targets: &[usize]) -> Result<(Vec<f64>, Vec<f32>)> {
    let v = logits.cols();
    let mut nll = Vec::with_capacity(targets.len());
    let mut probs = Vec::with_capacity(logits.numel());
    for (r, &tgt) in targets.iter().enumerate() {
        if tgt >= v {
            return Err(Error::Data(format!("target id {tgt} outside vocabulary of {v}")));
        }
        let row = logits.row(r);
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let sum: f64 = row.iter().map(|&x| (x as f64 - m).exp()).sum();
        let lse = m + sum.ln();
        nll.push(lse - row[tgt] as f64);
        probs.extend(row.iter().map(|&x| ((x as f64 - lse).exp()) as f32));
    }
    Ok((nll, probs))
}

/// Per-row NLL of `targets`, in `f64`, without keeping probabilities.
pub fn nll_rows(logits: &Tensor, targets: &[usize]) -> Result<Vec<f64>> {
    Ok(softmax_nll(logits, targets)?.0)
}
