//! Finite-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `|a - n| / max(|a|, |n|)` in the Euclidean norm; zero if both vanish.
    pub fn rel_err(&self) -> f64 {
        let diff: f64 = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = self.analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = self.numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        if denom == 0.0 {
            0.0
        } else {
            diff / denom
        }
    }
}

/// Compares the tape gradient of `sum(probe * f(x))` with central
/// differences of step `eps`, where `probe` is a fixed random tensor.
pub fn gradcheck(
    x: &Tensor,
    eps: f32,
    f: impl Fn(&mut Graph, Var) -> Result<Var>,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let y = f(&mut g, v)?;
    let shape = g.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    let probe = Tensor::uniform(shape[0], g.value(y).cols(), -1.0, 1.0, &mut rng)
        .reshape(shape)?;
    let p = g.constant(probe.clone());
    let weighted = g.mul(y, p)?;
    let loss = g.sum_all(weighted);
    let grads = g.backward(loss)?;
    let analytic = grads
        .get(v)
        .map(|t| t.data().iter().map(|&a| a as f64).collect())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let y = f(&mut g, v)?;
        Ok(g.value(y)
            .data()
            .iter()
            .zip(probe.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    };
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let step = (plus.data()[i] as f64) - (minus.data()[i] as f64);
        numeric.push((eval(plus)? - eval(minus)?) / step);
    }
    Ok(GradCheck { analytic, numeric })
}
