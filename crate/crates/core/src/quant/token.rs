//! Dynamic per-token group quantization of KV activations.
//!
//! For every token (row) and every group of `group_size` consecutive channels:
//!
//! ```text
//! m = mean(y_g)
//! n = max|y_g - m| / 2^(N-1)
//! code = clamp(round((y - m) / n), -2^(N-1), 2^(N-1) - 1)
//! y' = code * n + m
//! ```
//!
//! A group whose spread is below `1e-12` gets `n = 1` and all-zero codes, so
//! constant groups reconstruct exactly to their mean. The mean is accumulated
//! in `f64`, which makes it exact for constant groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) const SPREAD_EPS: f32 = 1e-12;

/// How the per-group center and step are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenScheme {
    /// Mean-shifted symmetric grid (the two-dimensional scheme's token half).
    Shifted,
    /// Plain symmetric absmax grid centered at zero (naive RTN).
    Absmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenQuantSpec {
    pub bits: u32,
    pub group_size: usize,
    pub scheme: TokenScheme,
}

impl TokenQuantSpec {
    pub fn new(bits: u32, group_size: usize) -> Self {
        TokenQuantSpec {
            bits,
            group_size,
            scheme: TokenScheme::Shifted,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::Config(format!(
                "token quantization supports 2..=8 bits, got {}",
                self.bits
            )));
        }
        if self.group_size == 0 {
            return Err(Error::Config("token group size must be positive".into()));
        }
        Ok(())
    }

    pub fn code_min(&self) -> i32 {
        -(1 << (self.bits - 1))
    }

    pub fn code_max(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    pub fn groups_per_row(&self, cols: usize) -> usize {
        cols.div_ceil(self.group_size)
    }
}

/// Center, step and saturation bookkeeping of one token group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct TokenGroup {
    pub m: f32,
    pub n: f32,
    pub degenerate: bool,
    /// Offset (within the group) of the element attaining the max deviation.
    pub arg: usize,
    /// Sign of that element's deviation from `m` (or of the element itself
    /// for the absmax scheme).
    pub sign: f32,
}

pub(crate) fn group_params(vals: &[f32], spec: &TokenQuantSpec) -> TokenGroup {
    let half = (1u32 << (spec.bits - 1)) as f32;
    let m = match spec.scheme {
        TokenScheme::Shifted => {
            let sum: f64 = vals.iter().map(|&v| v as f64).sum();
            (sum / vals.len() as f64) as f32
        }
        TokenScheme::Absmax => 0.0,
    };
    let mut arg = 0;
    let mut spread = -1.0f32;
    for (i, &v) in vals.iter().enumerate() {
        let d = (v - m).abs();
        if d > spread {
            spread = d;
            arg = i;
        }
    }
    let sign = if vals[arg] - m < 0.0 { -1.0 } else { 1.0 };
    if spread < SPREAD_EPS {
        return TokenGroup {
            m,
            n: 1.0,
            degenerate: true,
            arg,
            sign,
        };
    }
    let levels = match spec.scheme {
        TokenScheme::Shifted => half,
        TokenScheme::Absmax => half - 1.0,
    };
    TokenGroup {
        m,
        n: spread / levels,
        degenerate: false,
        arg,
        sign,
    }
}

/// Unclamped rounded code and its clamped counterpart.
#[inline]
pub(crate) fn code_of(v: f32, g: &TokenGroup, spec: &TokenQuantSpec) -> (f32, f32) {
    if g.degenerate {
        return (0.0, 0.0);
    }
    let raw = ((v - g.m) / g.n).round();
    let clamped = raw.clamp(spec.code_min() as f32, spec.code_max() as f32);
    (raw, clamped)
}

#[inline]
pub(crate) fn dequant_value(code: f32, g: &TokenGroup) -> f32 {
    code * g.n + g.m
}

/// Token-quantized tensor: `i8` codes plus one `(m, n)` pair per
/// `(row, group)`, stored row-major over groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenQuantized {
    pub rows: usize,
    pub cols: usize,
    pub spec: TokenQuantSpec,
    pub codes: Vec<i8>,
    pub m: Vec<f32>,
    pub n: Vec<f32>,
}

impl TokenQuantized {
    pub fn dequantize(&self) -> Tensor {
        let gpr = self.spec.groups_per_row(self.cols);
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let gi = r * gpr + c / self.spec.group_size;
                let code = self.codes[r * self.cols + c] as f32;
                out.push(code * self.n[gi] + self.m[gi]);
            }
        }
        Tensor::from_vec(self.rows, self.cols, out)
    }

    pub fn codes_in_range(&self) -> bool {
        let (lo, hi) = (self.spec.code_min(), self.spec.code_max());
        self.codes.iter().all(|&c| (lo..=hi).contains(&(c as i32)))
    }
}

pub fn quantize_token(y: &Tensor, spec: &TokenQuantSpec) -> Result<TokenQuantized> {
    spec.validate()?;
    if !y.all_finite() {
        return Err(Error::NonFinite { op: "quantize_token" });
    }
    let (rows, cols) = (y.rows(), y.cols());
    let gpr = spec.groups_per_row(cols);
    let mut codes = Vec::with_capacity(rows * cols);
    let mut ms = Vec::with_capacity(rows * gpr);
    let mut ns = Vec::with_capacity(rows * gpr);
    for r in 0..rows {
        for chunk in y.row(r).chunks(spec.group_size) {
            let g = group_params(chunk, spec);
            for &v in chunk {
                codes.push(code_of(v, &g, spec).1 as i8);
            }
            ms.push(g.m);
            ns.push(g.n);
        }
    }
    Ok(TokenQuantized {
        rows,
        cols,
        spec: *spec,
        codes,
        m: ms,
        n: ns,
    })
}

/// Quantize-then-dequantize without keeping the codes.
pub fn fake_quantize_token(y: &Tensor, spec: &TokenQuantSpec) -> Result<Tensor> {
    Ok(quantize_token(y, spec)?.dequantize())
}
