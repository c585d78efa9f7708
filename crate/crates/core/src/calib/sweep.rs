//! Calibration depth sweep: one full calibration per `k` with a shared seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::model::Model;

use super::{calibrate_model, CalibConfig, CalibrationReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub mean_final_loss: f64,
    pub mean_loss_ratio: f64,
    /// Perplexity of the calibrated model on the evaluation tokens.
    pub perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub rows: Vec<SweepRow>,
    pub reports: Vec<CalibrationReport>,
}

pub fn sweep_k(
    model: &Model,
    calib_tokens: &[usize],
    eval_tokens: &[usize],
    k_values: &[usize],
    cfg: &CalibConfig,
    opts: &EvalOptions,
) -> Result<SweepReport> {
    let n = model.layers.len();
    if let Some(&k) = k_values.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::Config(format!("k = {k} outside 1..={n}")));
    }
    let mut rows = Vec::with_capacity(k_values.len());
    let mut reports = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let c = CalibConfig { k, ..cfg.clone() };
        let (q, report) = calibrate_model(model, calib_tokens, &c)?;
        let e = evaluate(&q, None, eval_tokens, opts)?;
        log::info!("k = {k}: mean final loss {:.5}, ppl {:.4}", report.mean_final_loss, e.perplexity);
        rows.push(SweepRow {
            k,
            mean_final_loss: report.mean_final_loss,
            mean_loss_ratio: report.mean_loss_ratio,
            perplexity: e.perplexity,
        });
        reports.push(report);
    }
    Ok(SweepReport {
        seed: cfg.seed,
        rows,
        reports,
    })
}
