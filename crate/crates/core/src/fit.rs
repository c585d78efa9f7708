//! Brief next-token training of a full-precision model on a byte corpus, so
//! that perplexity comparisons between quantized variants mean something.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus;
use crate::error::{Error, Result};
use crate::model::{block, Model, QuantMode};
use crate::optim::{AdamConfig, AdamW};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    /// Sequences per step.
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f32,
    /// Linear warmup steps; cosine decay to a tenth of `lr` afterwards.
    pub warmup: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f32,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 200,
            batch: 4,
            seq_len: 64,
            lr: 3e-3,
            warmup: 20,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl FitConfig {
    fn lr_at(&self, step: usize) -> f32 {
        if step < self.warmup {
            return self.lr * (step + 1) as f32 / self.warmup as f32;
        }
        let span = (self.steps - self.warmup).max(1) as f32;
        let t = (step - self.warmup) as f32 / span;
        let floor = 0.1 * self.lr;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub seed: u64,
    /// Mean cross-entropy of each step's batch, before the update.
    pub losses: Vec<f32>,
}

/// Mean next-token cross-entropy of one sequence with every weight
/// registered as a trainable parameter. Returns the loss and the parameter
/// handles in [`param_slots`] order.
fn sequence_loss(model: &Model, g: &mut Graph, ids: &[usize]) -> Result<(Var, Vec<Var>)> {
    let dims = model.dims();
    let (inputs, targets) = (&ids[..ids.len() - 1], &ids[1..]);
    let mut params = Vec::new();
    let embed = g.param(Arc::clone(&model.embed));
    params.push(embed);
    let mut x = g.embedding(embed, inputs)?;
    for layer in &model.layers {
        let p = layer.vars(g, true);
        params.extend(p.all());
        x = block::forward_plain(g, x, &p, &dims)?;
    }
    let norm = g.param(Arc::clone(&model.final_norm));
    let head = g.param(Arc::clone(&model.lm_head));
    params.extend([norm, head]);
    let h = g.rms_norm(x, norm, model.config.norm_eps)?;
    let logits = g.matmul(h, head)?;
    Ok((g.cross_entropy(logits, targets)?, params))
}

fn param_slots(model: &mut Model) -> Vec<&mut Arc<Tensor>> {
    let mut out = vec![&mut model.embed];
    for layer in &mut model.layers {
        out.extend(layer.tensors_mut());
    }
    out.push(&mut model.final_norm);
    out.push(&mut model.lm_head);
    out
}

/// Trains every weight of a full-precision model with AdamW on random
/// corpus segments.
pub fn fit(model: &Model, tokens: &[usize], cfg: &FitConfig) -> Result<(Model, FitReport)> {
    if model.config.quant_mode != QuantMode::Fp || model.quant.is_some() {
        return Err(Error::Contract("fit needs a full-precision model".into()));
    }
    if model.layers.iter().any(|l| l.k_smooth.absorbed || l.v_smooth.absorbed) {
        return Err(Error::Contract("fit needs a model without absorbed smoothing".into()));
    }
    if cfg.batch == 0 || cfg.seq_len == 0 {
        return Err(Error::Config("fit batch and seq_len must be positive".into()));
    }
    if cfg.seq_len > model.config.max_seq_len {
        return Err(Error::Capacity {
            requested: cfg.seq_len,
            max: model.config.max_seq_len,
        });
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_slots = param_slots(&mut model).len();
    let mut opt = AdamW::new(AdamConfig::default(), n_slots);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        // BOS + seq_len tokens: seq_len inputs, seq_len targets.
        let segs = corpus::sample_segments(tokens, cfg.batch, cfg.seq_len, &mut rng)?;
        let per_seq: Vec<(f32, Vec<Tensor>)> = segs
            .par_iter()
            .map(|seg| -> Result<(f32, Vec<Tensor>)> {
                let mut g = Graph::new();
                let (loss, params) = sequence_loss(&model, &mut g, seg)?;
                let l = g.value(loss).item();
                let mut grads = g.backward(loss)?;
                let gs = params
                    .iter()
                    .map(|&p| grads.take(p).expect("parameter gradient"))
                    .collect();
                Ok((l, gs))
            })
            .collect::<Result<_>>()?;
        let inv = 1.0 / cfg.batch as f32;
        let mut total: Vec<Tensor> = per_seq[0].1.iter().map(|t| t.map(|_| 0.0)).collect();
        let mut loss = 0.0;
        for (l, gs) in &per_seq {
            loss += l * inv;
            for (acc, g) in total.iter_mut().zip(gs) {
                for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v * inv;
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "fit" });
        }
        losses.push(loss);
        let norm = total
            .iter()
            .flat_map(|t| t.data())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt() as f32;
        let clip = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        let lr = cfg.lr_at(step);
        opt.tick();
        for (slot, (param, grad)) in param_slots(&mut model).into_iter().zip(&total).enumerate() {
            let g = if clip < 1.0 { grad.map(|v| v * clip) } else { grad.clone() };
            opt.update(slot, Arc::make_mut(param), &g, lr);
        }
        if step % 50 == 0 {
            log::debug!("fit step {step}: loss {loss:.4}");
        }
    }
    Ok((
        model,
        FitReport {
            seed: cfg.seed,
            losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn loss_decreases_on_a_repetitive_corpus() {
        let cfg = ModelConfig {
            n_layers: 1,
            hidden_size: 32,
            n_heads: 2,
            head_dim: 16,
            intermediate_size: 48,
            max_seq_len: 32,
            ..ModelConfig::tiny()
        };
        let m = Model::random(cfg, 0).unwrap();
        let toks = corpus::encode(&corpus::synthetic(0, 4000));
        let fc = FitConfig {
            steps: 40,
            batch: 2,
            seq_len: 32,
            lr: 1e-2,
            warmup: 5,
            ..FitConfig::default()
        };
        let (fitted, report) = fit(&m, &toks, &fc).unwrap();
        let head: f32 = report.losses[..5].iter().sum::<f32>() / 5.0;
        let tail: f32 = report.losses[35..].iter().sum::<f32>() / 5.0;
        assert!(tail < head - 1.0, "{head} -> {tail}");
        assert_ne!(fitted.embed, m.embed);
        // Same seed, same result.
        let (again, _) = fit(&m, &toks, &fc).unwrap();
        assert_eq!(again, fitted);
    }

    #[test]
    fn rejects_quantized_models() {
        let m = Model::random(ModelConfig::tiny(), 0).unwrap();
        let q = m.quantize_weights(QuantMode::WeightOnly, None).unwrap();
        assert!(fit(&q, &[1, 2, 3], &FitConfig::default()).is_err());
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = FitConfig {
            steps: 100,
            warmup: 10,
            lr: 1.0,
            ..FitConfig::default()
        };
        assert!((c.lr_at(0) - 0.1).abs() < 1e-6);
        assert!((c.lr_at(10) - 1.0).abs() < 1e-6);
        assert!(c.lr_at(99) < 0.12);
    }
}
