//! Human-readable text for every report.

use std::fmt::Write;

use serde::Serialize;

use kvq::ablation::Ablation;
use kvq::analyzer::{DeployConfig, MemoryBreakdown, MemoryRow, Phase, TimeEstimate, TimeRow, GIB};
use kvq::calib::{CalibrationReport, SweepReport};
use kvq::eval::EvalReport;

pub fn calibration(r: &CalibrationReport) -> String {
    let mut s = String::new();
    let c = &r.config;
    let _ = writeln!(
        s,
        "calibration: k={} epochs={} segments={}x{} seed={} loss={:?}",
        c.k, c.epochs, c.n_segments, c.seg_len, r.seed, c.loss
    );
    let _ = writeln!(s, "{:>5} {:>3} {:>12} {:>12} {:>7}  note", "block", "k", "initial", "final", "ratio");
    for b in &r.blocks {
        let note = match (b.failed, b.lr_halved) {
            (true, _) => "kept initialization",
            (false, true) => "lr halved",
            _ => "",
        };
        let ratio = if b.initial_loss > 0.0 { b.final_loss / b.initial_loss } else { 1.0 };
        let _ = writeln!(
            s,
            "{:>5} {:>3} {:>12.6} {:>12.6} {:>7.4}  {note}",
            b.block, b.k_effective, b.initial_loss, b.final_loss, ratio
        );
    }
    let _ = writeln!(
        s,
        "mean loss ratio {:.4}, mean final loss {:.6}, {:.1}s",
        r.mean_loss_ratio, r.mean_final_loss, r.elapsed_secs
    );
    s
}

pub fn eval(r: &EvalReport) -> String {
    let mut s = format!(
        "{} ({}): perplexity {:.4}, mean NLL {:.6} over {} tokens\n",
        r.setting,
        if r.use_cache { "cached decode" } else { "prefill" },
        r.perplexity,
        r.mean_nll,
        r.n_tokens
    );
    if let Some(mae) = r.logit_mae {
        let div = r
            .first_divergence
            .map_or("none".to_string(), |d| d.to_string());
        let _ = writeln!(s, "logit MAE vs reference {mae:.6}, first divergence at {div}");
    }
    s
}

pub fn memory_rows(rows: &[MemoryRow]) -> String {
    let mut s = format!(
        "{:<12} {:>5} {:>6} {:>8} {:>8} {:>8} {:>8}   (GiB)\n",
        "model", "batch", "len", "FP16", "W4", "W4KV4", "W4A4"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>5} {:>6} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            r.model, r.batch, r.len, r.fp16_gib, r.w4_gib, r.w4kv4_gib, r.w4a4_gib
        );
    }
    s
}

pub fn time_rows(rows: &[TimeRow]) -> String {
    let mut s = format!("{:<8} {:>10} {:>10}\n", "setting", "seconds", "vs FP16");
    for r in rows {
        let _ = writeln!(s, "{:<8} {:>10.3} {:>10.4}", r.setting.label(), r.total_seconds, r.ratio_vs_fp16);
    }
    s
}

pub fn single_analysis(c: &DeployConfig, phase: Phase, m: &MemoryBreakdown, t: Option<&TimeEstimate>) -> String {
    let mut s = format!(
        "{} batch={} prompt={} gen={} W{}KV{}A{} ({:?})\n",
        c.arch.name, c.batch, c.prompt_len, c.gen_len, c.weight_bits, c.kv_bits, c.act_bits, phase
    );
    let p = &m.proportions;
    for (name, bytes, share) in [
        ("weights", m.weights_bytes, p.weights),
        ("kv cache", m.kv_cache_bytes, p.kv_cache),
        ("temp activations", m.temp_activation_bytes, p.temp_activation),
    ] {
        let _ = writeln!(s, "{name:<17} {:>10.3} GiB {:>6.1}%", bytes as f64 / GIB, share * 100.0);
    }
    let _ = writeln!(s, "{:<17} {:>10.3} GiB", "total", m.total_gib());
    if let Some(t) = t {
        let _ = writeln!(
            s,
            "decode: {:.3} s total, {:.3} ms/token, {:.4} of FP16",
            t.total_seconds,
            t.seconds_per_token * 1e3,
            t.ratio_vs_fp16
        );
    }
    s
}

#[derive(Serialize)]
pub struct MemoryCsv {
    weights_bytes: u64,
    kv_cache_bytes: u64,
    temp_activation_bytes: u64,
    total_bytes: u64,
}

impl From<&MemoryBreakdown> for MemoryCsv {
    fn from(m: &MemoryBreakdown) -> Self {
        MemoryCsv {
            weights_bytes: m.weights_bytes,
            kv_cache_bytes: m.kv_cache_bytes,
            temp_activation_bytes: m.temp_activation_bytes,
            total_bytes: m.total_bytes,
        }
    }
}

pub fn ablation(a: &Ablation) -> String {
    let mut s = format!("{:<28} {:>12} {:>12}\n", "variant", "perplexity", "logit MAE");
    for r in [&a.base, &a.variant] {
        let _ = writeln!(s, "{:<28} {:>12.4} {:>12.6}", r.label, r.perplexity, r.logit_mae);
    }
    let _ = writeln!(
        s,
        "{:<28} {:>+12.4} {:>+12.6}",
        "delta", a.delta_perplexity, a.delta_logit_mae
    );
    s
}

pub fn sweep(r: &SweepReport) -> String {
    let mut s = format!("{:>3} {:>16} {:>10} {:>12}\n", "k", "mean final loss", "ratio", "perplexity");
    for row in &r.rows {
        let _ = writeln!(
            s,
            "{:>3} {:>16.6} {:>10.4} {:>12.4}",
            row.k, row.mean_final_loss, row.mean_loss_ratio, row.perplexity
        );
    }
    s
}
