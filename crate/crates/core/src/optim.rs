//! AdamW with decoupled weight decay and per-call learning rates, so one
//! optimizer can serve parameter groups with different step sizes.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamConfig,
    t: i32,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    /// One moment slot per parameter tensor, sized lazily.
    pub fn new(cfg: AdamConfig, slots: usize) -> Self {
        AdamW {
            cfg,
            t: 0,
            moments: vec![(Vec::new(), Vec::new()); slots],
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Starts a new optimization step (advances the bias correction).
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Updates the parameter in `slot` in place.
    pub fn update(&mut self, slot: usize, param: &mut Tensor, grad: &Tensor, lr: f32) {
        assert!(self.t > 0, "call tick() before update()");
        assert_eq!(param.shape(), grad.shape(), "parameter/gradient shape mismatch");
        let c = self.cfg;
        let (m, v) = &mut self.moments[slot];
        if m.is_empty() {
            m.resize(param.numel(), 0.0);
            v.resize(param.numel(), 0.0);
        }
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (((p, &g), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
        }
    }
}
