//! Static per-channel shift/scale smoothing of a projection's output and its
//! absorption into the projection's weight and bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest admissible smoothing scale.
pub const MIN_SCALE: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `(Y - delta) / s`
    ToSmoothed,
    /// `Y~ * s + delta`
    ToRaw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingParams {
    pub s: Vec<f32>,
    pub delta: Vec<f32>,
    /// Set once `s`/`delta` have been folded into the producing projection.
    pub absorbed: bool,
}

impl SmoothingParams {
    pub fn identity(channels: usize) -> Self {
        SmoothingParams {
            s: vec![1.0; channels],
            delta: vec![0.0; channels],
            absorbed: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.s.len()
    }

    pub fn is_identity(&self) -> bool {
        self.s.iter().all(|&s| s == 1.0) && self.delta.iter().all(|&d| d == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s.len() != self.delta.len() {
            return Err(Error::shape("smoothing", &[self.s.len()], &[self.delta.len()]));
        }
        if let Some(&bad) = self.s.iter().find(|&&s| !(s >= MIN_SCALE)) {
            return Err(Error::DegenerateScale {
                op: "smoothing",
                value: bad,
                min: MIN_SCALE,
            });
        }
        Ok(())
    }

    /// Data-driven initialization from calibration outputs `y` (`[T, C]`):
    /// `delta` is the channel mean and `s` the channel's max absolute
    /// deviation from it, normalized by the largest such deviation and
    /// floored at `1e-5`.
    pub fn from_statistics(y: &[&Tensor]) -> Result<Self> {
        let c = y[0].cols();
        let mut sum = vec![0.0f64; c];
        let mut count = 0usize;
        for t in y {
            if t.cols() != c {
                return Err(Error::shape("smoothing init", y[0].shape(), t.shape()));
            }
            for r in 0..t.rows() {
                for (acc, &v) in sum.iter_mut().zip(t.row(r)) {
                    *acc += v as f64;
                }
            }
            count += t.rows();
        }
        let delta: Vec<f32> = sum.iter().map(|&s| (s / count as f64) as f32).collect();
        let mut dev = vec![0.0f32; c];
        for t in y {
            for r in 0..t.rows() {
                for ((d, &v), &m) in dev.iter_mut().zip(t.row(r)).zip(&delta) {
                    *d = d.max((v - m).abs());
                }
            }
        }
        let top = dev.iter().fold(0.0f32, |a, &b| a.max(b));
        let s = dev
            .iter()
            .map(|&d| if top > 0.0 { (d / top).max(1e-5) } else { 1.0 })
            .collect();
        Ok(SmoothingParams {
            s,
            delta,
            absorbed: false,
        })
    }

    /// Folds the smoothing into `(W, B)`: `W~ = W / s` column-wise and
    /// `B~ = (B - delta) / s`. Marks the parameters absorbed.
    pub fn absorb(&mut self, w: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
        if self.absorbed {
            return Err(Error::Contract("smoothing already absorbed".into()));
        }
        self.validate()?;
        let c = self.channels();
        if w.cols() != c || b.shape() != [1, c] {
            return Err(Error::shape("absorb_smoothing", w.shape(), b.shape()));
        }
        let mut wt = w.clone();
        for row in wt.data_mut().chunks_mut(c) {
            for (v, &s) in row.iter_mut().zip(&self.s) {
                *v /= s;
            }
        }
        let bt: Vec<f32> = b
            .data()
            .iter()
            .zip(self.s.iter().zip(&self.delta))
            .map(|(&b, (&s, &d))| (b - d) / s)
            .collect();
        self.absorbed = true;
        Ok((wt, Tensor::row_vector(bt)))
    }

    pub fn apply(&self, y: &Tensor, direction: Direction) -> Result<Tensor> {
        self.validate()?;
        let c = self.channels();
        if y.cols() != c {
            return Err(Error::shape("apply_kv_smoothing", y.shape(), &[1, c]));
        }
        let mut out = y.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((v, &s), &d) in row.iter_mut().zip(&self.s).zip(&self.delta) {
                *v = match direction {
                    Direction::ToRaw => *v * s + d,
                    Direction::ToSmoothed => (*v - d) / s,
                };
            }
        }
        Ok(out)
    }

    pub fn to_raw(&self, y: &Tensor) -> Result<Tensor> {
        self.apply(y, Direction::ToRaw)
    }

    pub fn to_smoothed(&self, y: &Tensor) -> Result<Tensor> {
        self.apply(y, Direction::ToSmoothed)
    }
}
