//! Perplexity and divergence-from-reference evaluation.
//!
//! The corpus is cut into consecutive windows of `max_seq_len` tokens. Each
//! window is fed as BOS followed by its first `max_seq_len - 1` tokens, so
//! every corpus token is predicted exactly once and no window exceeds the
//! model's context.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus;
use crate::error::{Error, Result};
use crate::model::{argmax, Model, QuantMode};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Score token by token through the cache instead of one prefill per
    /// window.
    pub use_cache: bool,
    /// Score at most this many windows from the start of the corpus.
    pub max_windows: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: String,
    pub use_cache: bool,
    pub n_tokens: usize,
    pub mean_nll: f64,
    pub perplexity: f64,
    /// Negative log-likelihood of every scored token, in corpus order.
    pub token_nll: Vec<f64>,
    /// First scored position whose greedy prediction differs from the
    /// reference model's.
    pub first_divergence: Option<usize>,
    /// Mean absolute logit difference to the reference model.
    pub logit_mae: Option<f64>,
}

/// Short name of the quantization setting, e.g. `W4KV4`.
pub fn setting_label(model: &Model) -> String {
    let c = &model.config;
    let w = if model.quant.is_some() {
        format!("W{}", c.weight_bits)
    } else {
        "W16".to_string()
    };
    match c.quant_mode {
        QuantMode::Fp => "FP16".to_string(),
        QuantMode::WeightOnly => w,
        QuantMode::WeightKv => format!("{w}KV{}", c.kv_bits),
        QuantMode::WeightActivation => format!("{w}A{}", c.act_bits),
    }
}

/// Logits predicting `window[1..]` from `window[..len - 1]`.
pub fn window_logits(model: &Model, window: &[usize], use_cache: bool) -> Result<Tensor> {
    if window.len() < 2 {
        return Err(Error::Data("an evaluation window needs at least two tokens".into()));
    }
    let inputs = &window[..window.len() - 1];
    if !use_cache {
        return Ok(model.prefill(inputs)?.0);
    }
    let (first, mut cache) = model.prefill(&inputs[..1])?;
    let mut rows = vec![first];
    for &id in &inputs[1..] {
        rows.push(model.decode_step(id, &mut cache)?);
    }
    Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())
}

/// `log Σ exp(row) - row[target]` in double precision.
pub fn token_nll(row: &[f32], target: usize) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + sum.ln() - row[target] as f64
}

struct WindowScore {
    nll: Vec<f64>,
    abs_diff: f64,
    divergence: Option<usize>,
}

/// Scores `model` on `tokens`; `reference` (usually the full-precision
/// model) supplies the divergence metrics.
pub fn evaluate(
    model: &Model,
    reference: Option<&Model>,
    tokens: &[usize],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut windows = corpus::windows(tokens, model.config.max_seq_len)?;
    if let Some(n) = opts.max_windows {
        windows.truncate(n.max(1));
    }
    // Windows are independent; results are collected in order.
    let scores: Vec<WindowScore> = windows
        .par_iter()
        .map(|w| -> Result<WindowScore> {
            let logits = window_logits(model, w, opts.use_cache)?;
            if !logits.all_finite() {
                return Err(Error::NonFinite { op: "eval" });
            }
            let nll = (0..logits.rows()).map(|t| token_nll(logits.row(t), w[t + 1])).collect();
            let (mut abs_diff, mut divergence) = (0.0, None);
            if let Some(r) = reference {
                let rl = r.prefill(&w[..w.len() - 1])?.0;
                for t in 0..logits.rows() {
                    let (a, b) = (logits.row(t), rl.row(t));
                    abs_diff += a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>();
                    if divergence.is_none() && argmax(a) != argmax(b) {
                        divergence = Some(t);
                    }
                }
            }
            Ok(WindowScore {
                nll,
                abs_diff,
                divergence,
            })
        })
        .collect::<Result<_>>()?;
    let mut token_nll = Vec::new();
    let mut first_divergence = None;
    let mut abs_diff = 0.0;
    for s in scores {
        if first_divergence.is_none() {
            first_divergence = s.divergence.map(|d| d + token_nll.len());
        }
        abs_diff += s.abs_diff;
        token_nll.extend(s.nll);
    }
    let n = token_nll.len();
    let mean_nll = token_nll.iter().sum::<f64>() / n as f64;
    Ok(EvalReport {
        setting: setting_label(model),
        use_cache: opts.use_cache,
        n_tokens: n,
        mean_nll,
        perplexity: mean_nll.exp(),
        token_nll,
        first_divergence,
        logit_mae: reference.map(|_| abs_diff / (n * model.config.vocab_size) as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            hidden_size: 32,
            n_heads: 2,
            head_dim: 16,
            intermediate_size: 48,
            max_seq_len: 16,
            weight_group_size: 16,
            kv_group_size: 16,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn nll_of_uniform_logits_is_log_vocab() {
        let row = vec![0.3f32; 10];
        assert!((token_nll(&row, 4) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perplexity_is_exp_mean_nll_and_every_token_is_scored() {
        let m = Model::random(small(), 1).unwrap();
        let toks = corpus::encode(&corpus::synthetic(0, 40));
        let r = evaluate(&m, Some(&m), &toks, &EvalOptions::default()).unwrap();
        assert_eq!(r.n_tokens, 40);
        assert_eq!(r.perplexity, r.mean_nll.exp());
        assert_eq!(r.logit_mae, Some(0.0));
        assert_eq!(r.first_divergence, None);
        assert_eq!(r.setting, "FP16");
    }

    #[test]
    fn cached_and_uncached_agree_without_kv_quantization() {
        let m = Model::random(small(), 2).unwrap();
        let toks = corpus::encode(&corpus::synthetic(1, 30));
        let a = evaluate(&m, None, &toks, &EvalOptions::default()).unwrap();
        let b = evaluate(
            &m,
            None,
            &toks,
            &EvalOptions {
                use_cache: true,
                ..Default::default()
            },
        )
        .unwrap();
        for (x, y) in a.token_nll.iter().zip(&b.token_nll) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn weight_kv_without_cache_matches_weight_only() {
        let m = Model::random(small(), 3).unwrap();
        let toks = corpus::encode(&corpus::synthetic(2, 50));
        let w4 = m.quantize_weights(QuantMode::WeightOnly, None).unwrap();
        let wkv = w4.with_mode(QuantMode::WeightKv);
        let a = evaluate(&w4, Some(&m), &toks, &EvalOptions::default()).unwrap();
        let b = evaluate(&wkv, Some(&m), &toks, &EvalOptions::default()).unwrap();
        assert_eq!(a.perplexity, b.perplexity);
        assert_eq!((a.setting.as_str(), b.setting.as_str()), ("W4", "W4KV4"));
        let c = evaluate(
            &wkv,
            Some(&m),
            &toks,
            &EvalOptions {
                use_cache: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(c.logit_mae.unwrap() > a.logit_mae.unwrap());
    }

    #[test]
    fn window_limit_and_empty_corpus() {
        let m = Model::random(small(), 4).unwrap();
        let toks = corpus::encode(&corpus::synthetic(3, 100));
        let r = evaluate(
            &m,
            None,
            &toks,
            &EvalOptions {
                max_windows: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.n_tokens, 32);
        assert!(matches!(evaluate(&m, None, &[], &EvalOptions::default()), Err(Error::Data(_))));
    }
}
