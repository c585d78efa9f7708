//! Group-wise asymmetric weight quantization with learnable clipping.
//!
//! Weights are `[C_in, C_out]`; each output column is split into groups of
//! `group_size` consecutive input rows (the last group may be shorter). Per
//! group, with clipping factors `gamma, beta` in `(0, 1]`:
//!
//! ```text
//! h = (gamma * max(W) - beta * min(W)) / L
//! z = -round(beta * min(W) / h)
//! q = clamp(round(W / h) + z, 0, C)
//! W' = (q - z) * h
//! ```
//!
//! With [`WeightGrid::Full`], `L = C = 2^N - 1`. [`WeightGrid::HalfRange`]
//! reproduces the literal `L = C = 2^(N-1)` variant for ablations.
//!
//! The ratios `W / h` and `beta * min / h` are evaluated as
//! `x * L / (gamma * max - beta * min)` in `f64` so that exact ties
//! (e.g. `-7.5`) are not perturbed by the rounding of `h`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::token::SPREAD_EPS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightGrid {
    Full,
    HalfRange,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightQuantSpec {
    pub bits: u32,
    pub group_size: usize,
    pub grid: WeightGrid,
}

impl WeightQuantSpec {
    pub fn new(bits: u32, group_size: usize) -> Self {
        WeightQuantSpec {
            bits,
            group_size,
            grid: WeightGrid::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::Config(format!(
                "weight quantization supports 2..=8 bits, got {}",
                self.bits
            )));
        }
        if self.group_size == 0 {
            return Err(Error::Config("weight group size must be positive".into()));
        }
        Ok(())
    }

    /// Divisor `L` of the step.
    pub fn levels(&self) -> f64 {
        match self.grid {
            WeightGrid::Full => ((1u64 << self.bits) - 1) as f64,
            WeightGrid::HalfRange => (1u64 << (self.bits - 1)) as f64,
        }
    }

    pub fn code_max(&self) -> i32 {
        match self.grid {
            WeightGrid::Full => (1 << self.bits) - 1,
            WeightGrid::HalfRange => 1 << (self.bits - 1),
        }
    }

    pub fn groups(&self, rows: usize) -> usize {
        rows.div_ceil(self.group_size)
    }
}

/// Per-group statistics and grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct WeightGroup {
    pub max: f32,
    pub min: f32,
    pub arg_max: usize,
    pub arg_min: usize,
    pub h: f32,
    pub z: i32,
    /// `L / (gamma * max - beta * min)`; zero for degenerate groups.
    pub inv_step: f64,
    pub degenerate: bool,
}

pub(crate) fn group_params(
    vals: impl Iterator<Item = f32>,
    gamma: f32,
    beta: f32,
    spec: &WeightQuantSpec,
) -> WeightGroup {
    let (mut max, mut min) = (f32::NEG_INFINITY, f32::INFINITY);
    let (mut arg_max, mut arg_min) = (0, 0);
    for (i, v) in vals.enumerate() {
        if v > max {
            max = v;
            arg_max = i;
        }
        if v < min {
            min = v;
            arg_min = i;
        }
    }
    let range = gamma * max - beta * min;
    if !(range >= SPREAD_EPS) {
        // Constant (or collapsed) group: unit-free grid anchored at the
        // largest magnitude, which reconstructs a constant group exactly.
        let mag = max.abs().max(min.abs());
        let h = if mag >= SPREAD_EPS { mag } else { 1.0 };
        let z = -((min / h).round() as i32);
        return WeightGroup {
            max,
            min,
            arg_max,
            arg_min,
            h,
            z,
            inv_step: 0.0,
            degenerate: true,
        };
    }
    let levels = spec.levels();
    let inv_step = levels / range as f64;
    let h = (range as f64 / levels) as f32;
    let z = -((beta as f64 * min as f64 * inv_step).round() as i32);
    WeightGroup {
        max,
        min,
        arg_max,
        arg_min,
        h,
        z,
        inv_step,
        degenerate: false,
    }
}

/// `round(W / h)` for one element.
#[inline]
pub(crate) fn scaled(v: f32, g: &WeightGroup) -> f64 {
    if g.degenerate {
        (v / g.h) as f64
    } else {
        v as f64 * g.inv_step
    }
}

/// Returns `(pre-clamp code, clamped code)`.
#[inline]
pub(crate) fn code_of(v: f32, g: &WeightGroup, spec: &WeightQuantSpec) -> (i32, i32) {
    let raw = scaled(v, g).round() as i32 + g.z;
    (raw, raw.clamp(0, spec.code_max()))
}

#[inline]
pub(crate) fn dequant_value(code: i32, g: &WeightGroup) -> f32 {
    (code - g.z) as f32 * g.h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightQuantized {
    pub rows: usize,
    pub cols: usize,
    pub spec: WeightQuantSpec,
    /// Row-major codes, one byte each.
    pub codes: Vec<u8>,
    /// `[groups, cols]` steps.
    pub h: Vec<f32>,
    /// `[groups, cols]` integer zero points.
    pub z: Vec<i32>,
}

impl WeightQuantized {
    pub fn groups(&self) -> usize {
        self.spec.groups(self.rows)
    }

    pub fn dequantize(&self) -> Tensor {
        let mut out = vec![0.0f32; self.rows * self.cols];
        for r in 0..self.rows {
            let g = r / self.spec.group_size;
            for c in 0..self.cols {
                let gi = g * self.cols + c;
                let code = self.codes[r * self.cols + c] as i32;
                out[r * self.cols + c] = (code - self.z[gi]) as f32 * self.h[gi];
            }
        }
        Tensor::from_vec(self.rows, self.cols, out)
    }

    pub fn codes_in_range(&self) -> bool {
        self.codes
            .iter()
            .all(|&c| (c as i32) <= self.spec.code_max())
    }
}

fn check_clip(name: &str, t: &Tensor, groups: usize, cols: usize) -> Result<()> {
    if t.shape() != [groups, cols] {
        return Err(Error::Config(format!(
            "{name} must have shape [{groups}, {cols}], got {:?}",
            t.shape()
        )));
    }
    if t.data().iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::Config(format!("{name} values must lie in (0, 1]")));
    }
    Ok(())
}

/// Quantizes `w` group-wise. `clip` supplies `(gamma, beta)` as `[groups,
/// cols]` tensors of mapped values; `None` means no clipping (`gamma = beta
/// = 1`, i.e. plain round-to-nearest).
pub fn quantize_weight(
    w: &Tensor,
    spec: &WeightQuantSpec,
    clip: Option<(&Tensor, &Tensor)>,
) -> Result<WeightQuantized> {
    spec.validate()?;
    if !w.all_finite() {
        return Err(Error::NonFinite { op: "quantize_weight" });
    }
    let (rows, cols) = (w.rows(), w.cols());
    let groups = spec.groups(rows);
    if let Some((gamma, beta)) = clip {
        check_clip("gamma", gamma, groups, cols)?;
        check_clip("beta", beta, groups, cols)?;
    }
    let data = w.data();
    let mut codes = vec![0u8; rows * cols];
    let mut hs = vec![0.0f32; groups * cols];
    let mut zs = vec![0i32; groups * cols];
    for g in 0..groups {
        let r0 = g * spec.group_size;
        let r1 = (r0 + spec.group_size).min(rows);
        for c in 0..cols {
            let gi = g * cols + c;
            let (gamma, beta) = clip.map_or((1.0, 1.0), |(a, b)| (a.data()[gi], b.data()[gi]));
            let col = (r0..r1).map(|r| data[r * cols + c]);
            let grp = group_params(col, gamma, beta, spec);
            for r in r0..r1 {
                codes[r * cols + c] = code_of(data[r * cols + c], &grp, spec).1 as u8;
            }
            hs[gi] = grp.h;
            zs[gi] = grp.z;
        }
    }
    Ok(WeightQuantized {
        rows,
        cols,
        spec: *spec,
        codes,
        h: hs,
        z: zs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_weights_are_a_constant_group() {
        let w = Tensor::zeros(4, 2);
        let q = quantize_weight(&w, &WeightQuantSpec::new(4, 4), None).unwrap();
        assert_eq!(q.dequantize(), w);
    }

    #[test]
    fn constant_groups_are_lossless() {
        for c in [-3.7f32, 0.3, 5.0, 1e-3] {
            let w = Tensor::full(3, 1, c);
            let q = quantize_weight(&w, &WeightQuantSpec::new(4, 3), None).unwrap();
            assert_eq!(q.dequantize(), w, "constant {c}");
            assert!(q.codes_in_range());
        }
    }

    #[test]
    fn worked_example() {
        let w = Tensor::from_rows(&[vec![-1.0], vec![0.0], vec![1.0]]);
        let q = quantize_weight(&w, &WeightQuantSpec::new(4, 3), None).unwrap();
        assert_eq!(q.z, vec![8]);
        assert_eq!(q.codes, vec![0, 8, 15]);
        assert_eq!(q.h[0], 2.0f32 / 15.0);
        let deq = q.dequantize();
        let want = [-16.0f32 / 15.0, 0.0, 14.0 / 15.0];
        for (a, b) in deq.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn clipping_helps_the_bulk_when_there_is_an_outlier() {
        // 63 deterministic "normal-ish" values plus a 10-sigma outlier.
        let mut vals: Vec<f32> = (0..63)
            .map(|i| {
                let t = (i as f32 + 0.5) / 63.0;
                (t - 0.5) * 3.4
            })
            .collect();
        vals.push(10.0);
        let w = Tensor::from_vec(64, 1, vals.clone());
        let spec = WeightQuantSpec::new(4, 64);
        let mse_bulk = |gamma: f32| {
            let clip = (Tensor::scalar(gamma), Tensor::scalar(1.0));
            let deq = quantize_weight(&w, &spec, Some((&clip.0, &clip.1)))
                .unwrap()
                .dequantize();
            vals[..63]
                .iter()
                .zip(deq.data())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / 63.0
        };
        assert!(mse_bulk(0.5) < mse_bulk(1.0));
    }

    #[test]
    fn half_range_grid_uses_literal_bounds() {
        let w = Tensor::from_rows(&[vec![-1.0], vec![1.0]]);
        let spec = WeightQuantSpec {
            grid: WeightGrid::HalfRange,
            ..WeightQuantSpec::new(4, 2)
        };
        let q = quantize_weight(&w, &spec, None).unwrap();
        assert_eq!(q.h[0], 0.25);
        assert_eq!(q.z, vec![4]);
        assert_eq!(q.codes, vec![0, 8]);
    }

    #[test]
    fn partial_trailing_group() {
        let w = Tensor::from_vec(5, 1, vec![0.0, 1.0, 2.0, 3.0, -4.0]);
        let q = quantize_weight(&w, &WeightQuantSpec::new(4, 4), None).unwrap();
        assert_eq!(q.groups(), 2);
        // Single-element group is constant and exact.
        assert_eq!(q.dequantize().data()[4], -4.0);
    }

    #[test]
    fn rejects_out_of_range_clip() {
        let w = Tensor::zeros(2, 1);
        let bad = Tensor::scalar(1.5);
        let ok = Tensor::scalar(1.0);
        assert!(quantize_weight(&w, &WeightQuantSpec::new(4, 2), Some((&bad, &ok))).is_err());
    }

    proptest! {
        #[test]
        fn codes_in_range_with_outliers(vals in proptest::collection::vec(-1e6f32..1e6, 1..64), bits in 2u32..=8) {
            let w = Tensor::from_vec(vals.len(), 1, vals);
            let q = quantize_weight(&w, &WeightQuantSpec::new(bits, 16), None).unwrap();
            prop_assert!(q.codes_in_range());
        }

        #[test]
        fn requantizing_is_idempotent(vals in proptest::collection::vec(-4f32..4.0, 2..64)) {
            let w = Tensor::from_vec(vals.len(), 1, vals);
            let spec = WeightQuantSpec::new(4, 16);
            let q1 = quantize_weight(&w, &spec, None).unwrap();
            let q2 = quantize_weight(&q1.dequantize(), &spec, None).unwrap();
            prop_assert_eq!(q1.codes, q2.codes);
        }
    }
}
