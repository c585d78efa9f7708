//! Fused fake-quantization ops and their surrogate gradients.
//!
//! Rounding has zero derivative almost everywhere, so training uses a
//! straight-through surrogate: inside the clamp range the rounded value is
//! treated as the unrounded one. [`SurrogateGrad::FrozenCodes`] instead holds
//! the integer codes fixed and differentiates the remaining smooth function
//! of the grid parameters, which is the true derivative away from rounding
//! and clamping boundaries and is what finite differences measure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::token::{self, TokenQuantSpec, TokenScheme};
use crate::quant::weight::{self, WeightQuantSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateGrad {
    /// Straight-through estimator for the rounding step.
    #[default]
    Ste,
    /// Codes held constant; exact derivative between kinks.
    FrozenCodes,
}

fn check_weight_inputs(w: &Tensor, gamma: &Tensor, beta: &Tensor, spec: &WeightQuantSpec) -> Result<()> {
    spec.validate()?;
    let want = [spec.groups(w.rows()), w.cols()];
    if gamma.shape() != want {
        return Err(Error::shape("fake_quant_weight", &want, gamma.shape()));
    }
    if beta.shape() != want {
        return Err(Error::shape("fake_quant_weight", &want, beta.shape()));
    }
    if !w.all_finite() || !gamma.all_finite() || !beta.all_finite() {
        return Err(Error::NonFinite { op: "fake_quant_weight" });
    }
    Ok(())
}

pub(crate) fn weight_forward(
    w: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    spec: &WeightQuantSpec,
) -> Result<Tensor> {
    check_weight_inputs(w, gamma, beta, spec)?;
    let (rows, cols) = (w.rows(), w.cols());
    let data = w.data();
    let mut out = vec![0.0f32; rows * cols];
    for g in 0..spec.groups(rows) {
        let r0 = g * spec.group_size;
        let r1 = (r0 + spec.group_size).min(rows);
        for c in 0..cols {
            let gi = g * cols + c;
            let grp = weight::group_params(
                (r0..r1).map(|r| data[r * cols + c]),
                gamma.data()[gi],
                beta.data()[gi],
                spec,
            );
            for r in r0..r1 {
                let code = weight::code_of(data[r * cols + c], &grp, spec).1;
                out[r * cols + c] = weight::dequant_value(code, &grp);
            }
        }
    }
    Ok(Tensor::from_vec(rows, cols, out))
}

pub(crate) fn weight_backward(
    w: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    spec: &WeightQuantSpec,
    mode: SurrogateGrad,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (rows, cols) = (w.rows(), w.cols());
    let data = w.data();
    let gd = dy.data();
    let levels = spec.levels() as f32;
    let mut dw = vec![0.0f32; rows * cols];
    let mut dgamma = vec![0.0f32; gamma.numel()];
    let mut dbeta = vec![0.0f32; beta.numel()];
    for g in 0..spec.groups(rows) {
        let r0 = g * spec.group_size;
        let r1 = (r0 + spec.group_size).min(rows);
        for c in 0..cols {
            let gi = g * cols + c;
            let (a, b) = (gamma.data()[gi], beta.data()[gi]);
            let grp = weight::group_params((r0..r1).map(|r| data[r * cols + c]), a, b, spec);
            if grp.degenerate {
                if mode == SurrogateGrad::Ste {
                    for r in r0..r1 {
                        let (raw, clamped) = weight::code_of(data[r * cols + c], &grp, spec);
                        if raw == clamped {
                            dw[r * cols + c] += gd[r * cols + c];
                        }
                    }
                }
                continue;
            }
            let (mut gh, mut gb, mut gmn) = (0.0f32, 0.0f32, 0.0f32);
            let z = grp.z as f32;
            for r in r0..r1 {
                let idx = r * cols + c;
                let u = weight::scaled(data[idx], &grp);
                let (raw, clamped) = weight::code_of(data[idx], &grp, spec);
                let gv = gd[idx];
                if raw == clamped {
                    let rounded = raw as f32 - z;
                    match mode {
                        SurrogateGrad::Ste => {
                            dw[idx] += gv;
                            gh += gv * (rounded - u as f32);
                        }
                        SurrogateGrad::FrozenCodes => gh += gv * rounded,
                    }
                } else {
                    let cz = clamped as f32 - z;
                    match mode {
                        SurrogateGrad::Ste => {
                            // z = -round(b * min / h) with round passed through.
                            gb += gv * grp.min;
                            gmn += gv * b;
                            gh += gv * (cz - (b as f64 * grp.min as f64 * grp.inv_step) as f32);
                        }
                        SurrogateGrad::FrozenCodes => gh += gv * cz,
                    }
                }
            }
            // h = (a * max - b * min) / L
            dgamma[gi] += gh * grp.max / levels;
            gb -= gh * grp.min / levels;
            gmn -= gh * b / levels;
            let gmx = gh * a / levels;
            dbeta[gi] += gb;
            dw[(r0 + grp.arg_max) * cols + c] += gmx;
            dw[(r0 + grp.arg_min) * cols + c] += gmn;
        }
    }
    (
        Tensor::from_vec(rows, cols, dw),
        Tensor::new(gamma.shape().to_vec(), dgamma).expect("gamma shape"),
        Tensor::new(beta.shape().to_vec(), dbeta).expect("beta shape"),
    )
}

pub(crate) fn token_forward(x: &Tensor, spec: &TokenQuantSpec) -> Tensor {
    let mut out = Vec::with_capacity(x.numel());
    for r in 0..x.rows() {
        for chunk in x.row(r).chunks(spec.group_size) {
            let g = token::group_params(chunk, spec);
            out.extend(
                chunk
                    .iter()
                    .map(|&v| token::dequant_value(token::code_of(v, &g, spec).1, &g)),
            );
        }
    }
    Tensor::from_vec(x.rows(), x.cols(), out)
}

pub(crate) fn token_backward(
    x: &Tensor,
    spec: &TokenQuantSpec,
    mode: SurrogateGrad,
    dy: &Tensor,
) -> Tensor {
    let half = (1u32 << (spec.bits - 1)) as f32;
    let levels = match spec.scheme {
        TokenScheme::Shifted => half,
        TokenScheme::Absmax => half - 1.0,
    };
    let shifted = spec.scheme == TokenScheme::Shifted;
    let mut dx = Vec::with_capacity(x.numel());
    for r in 0..x.rows() {
        let dyr = dy.row(r);
        for (gidx, chunk) in x.row(r).chunks(spec.group_size).enumerate() {
            let base = gidx * spec.group_size;
            let gdy = &dyr[base..base + chunk.len()];
            let start = dx.len();
            dx.extend(std::iter::repeat_n(0.0f32, chunk.len()));
            let out = &mut dx[start..];
            let g = token::group_params(chunk, spec);
            let (mut gn, mut gm) = (0.0f32, 0.0f32);
            if g.degenerate {
                // Output is the group mean regardless of the codes.
                gm = gdy.iter().sum();
            } else {
                for (i, &v) in chunk.iter().enumerate() {
                    let (raw, clamped) = token::code_of(v, &g, spec);
                    let gv = gdy[i];
                    if mode == SurrogateGrad::Ste && raw == clamped {
                        out[i] += gv;
                        gn += gv * (raw - (v - g.m) / g.n);
                    } else {
                        gn += gv * clamped;
                        gm += gv;
                    }
                }
                // n = sign * (x_arg - m) / levels
                let ga = gn / levels;
                out[g.arg] += ga * g.sign;
                gm -= ga * g.sign;
            }
            if shifted {
                let share = gm / chunk.len() as f32;
                for o in out.iter_mut() {
                    *o += share;
                }
            }
        }
    }
    Tensor::from_vec(x.rows(), x.cols(), dx)
}
