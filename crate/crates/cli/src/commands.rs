use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use serde::Serialize;

use kvq::ablation::{Harness, Technique, Techniques};
use kvq::analyzer::{self, Architecture, DeployConfig, Phase, Setting};
use kvq::calib::{self, BlockParams, CalibConfig, LossKind};
use kvq::checkpoint;
use kvq::eval::{evaluate, setting_label, EvalOptions};
use kvq::fit::FitConfig;
use kvq::model::{ClipParams, Model, ModelConfig, QuantMode};
use kvq::quant::TokenScheme;

use crate::render;
use crate::{
    AblateArgs, AnalyzeArgs, ArchArg, CalibArgs, CalibrateArgs, EvalArgs, EvalFlags, FitArgs, GenerateArgs,
    Loss, Mode, PhaseArg, Preset, QuantizeArgs, SweepArgs,
};

/// A command-line mistake that clap cannot catch.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub struct Output {
    pub json: bool,
    pub report: Option<PathBuf>,
}

impl Output {
    fn emit<T: Serialize>(&self, value: &T, text: String) -> Result<()> {
        let json = serde_json::to_string_pretty(value)?;
        if let Some(p) = &self.report {
            std::fs::write(p, format!("{json}\n")).with_context(|| format!("writing {}", p.display()))?;
        }
        if self.json {
            println!("{json}");
        } else {
            print!("{text}");
        }
        Ok(())
    }
}

fn load(path: &Path) -> Result<Model> {
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn save(path: &Path, m: &Model) -> Result<()> {
    checkpoint::save(path, m).with_context(|| format!("writing {}", path.display()))
}

fn read_corpus(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading corpus {}", path.display()))?;
    if bytes.is_empty() {
        return Err(kvq::Error::Data(format!("corpus {} is empty", path.display())).into());
    }
    Ok(kvq::corpus::encode(&bytes))
}

fn calib_config(a: &CalibArgs) -> CalibConfig {
    CalibConfig {
        k: a.k,
        epochs: a.epochs,
        n_segments: a.segments,
        seg_len: a.seg_len,
        seed: a.seed,
        loss: match a.loss {
            Loss::Mae => LossKind::Mae,
            Loss::Mse => LossKind::Mse,
        },
        lr_smoothing: a.lr_smoothing,
        lr_clipping: a.lr_clipping,
        quantized_inputs: a.quantized_inputs,
        ..CalibConfig::default()
    }
}

fn eval_options(e: &EvalFlags) -> EvalOptions {
    EvalOptions {
        use_cache: e.use_cache,
        max_windows: e.max_windows,
    }
}

fn quant_mode(mode: Mode) -> QuantMode {
    match mode {
        Mode::Fp => QuantMode::Fp,
        Mode::W4 => QuantMode::WeightOnly,
        Mode::W4kv4 | Mode::Rtn => QuantMode::WeightKv,
        Mode::W4a4 => QuantMode::WeightActivation,
    }
}

/// Clipping factors at their calibration starting point for every layer.
fn initial_clipping(m: &Model) -> Vec<BTreeMap<String, ClipParams>> {
    let raw = CalibConfig::default().clip_init;
    m.layers
        .iter()
        .map(|l| {
            BlockParams::identity(m.config.hidden_size)
                .with_clipping(l, &m.config.weight_spec(), raw)
                .clip()
                .unwrap_or_default()
        })
        .collect()
}

/// Puts `m` into `mode`. Full-precision models are quantized with the
/// clipping factors at their calibration starting point, except `rtn`,
/// which uses none (`lossless_weights` skips the weights). The w4, w4kv4
/// and w4a4 checkpoints of one model therefore share their weights.
/// Quantized models only switch how the stored weights are run.
fn retarget(mut m: Model, mode: Mode, lossless_weights: bool) -> Result<Model> {
    if m.quant.is_some() {
        return match mode {
            Mode::Fp => Err(usage("the checkpoint holds quantized weights; pick w4, w4kv4 or w4a4")),
            Mode::Rtn => Err(usage("rtn quantizes a full-precision checkpoint; this one is already quantized")),
            _ => {
                m.config.quant_mode = quant_mode(mode);
                Ok(m)
            }
        };
    }
    if mode == Mode::Rtn {
        m.config.kv_scheme = TokenScheme::Shifted;
        m.config.poq = true;
    }
    let qm = quant_mode(mode);
    if mode == Mode::Fp || lossless_weights {
        m.config.quant_mode = qm;
        return Ok(m);
    }
    if mode == Mode::Rtn {
        return Ok(m.quantize_weights(qm, None)?);
    }
    warn!("uncalibrated checkpoint: clipping is at its initialization and smoothing is the identity; run `kvq calibrate` for learned parameters");
    let clip = initial_clipping(&m);
    Ok(m.quantize_weights(qm, Some(&clip))?)
}

#[derive(Serialize)]
struct QuantizeReport {
    mode: String,
    setting: String,
    weight_bits: Option<u32>,
    weight_group_size: usize,
    kv_bits: u32,
    kv_group_size: usize,
    act_bits: u32,
    poq: bool,
    dequantized: bool,
    file_bytes: u64,
}

pub fn quantize(a: QuantizeArgs, out: &Output) -> Result<()> {
    let mut m = load(&a.checkpoint)?;
    match (a.calibrated, m.quant.is_some()) {
        (true, false) => return Err(usage("--calibrated needs a quantized (calibrated) checkpoint")),
        (false, true) => {
            return Err(usage(
                "the checkpoint is already quantized; pass --calibrated to keep its weights and change the mode",
            ))
        }
        _ => {}
    }
    if a.calibrated && (a.bits.is_some() || a.group_size.is_some()) {
        return Err(usage("the weights of a calibrated checkpoint are fixed; --bits and --group-size do not apply"));
    }
    let lossless = matches!(a.bits, Some(16 | 32));
    if let Some(b) = a.bits.filter(|_| !lossless) {
        m.config.weight_bits = b;
    }
    if let Some(g) = a.group_size {
        m.config.weight_group_size = g;
        let c = &m.config;
        if c.hidden_size % g != 0 || c.intermediate_size % g != 0 {
            info!(
                "group size {g} does not divide {} or {} input channels; the last group of those projections is partial",
                c.hidden_size, c.intermediate_size
            );
        }
    }
    if let Some(b) = a.kv_bits {
        m.config.kv_bits = b;
    }
    if let Some(g) = a.kv_group_size {
        m.config.kv_group_size = g;
    }
    if let Some(b) = a.act_bits {
        m.config.act_bits = b;
    }
    m.config.validate()?;
    let mut q = retarget(m, a.mode, lossless)?;
    if a.dequantize {
        q.quant = None;
        q.config.quant_mode = QuantMode::Fp;
    }
    save(&a.out, &q)?;
    let c = &q.config;
    let report = QuantizeReport {
        mode: format!("{:?}", a.mode).to_lowercase(),
        setting: setting_label(&q),
        weight_bits: (!lossless).then_some(c.weight_bits),
        weight_group_size: c.weight_group_size,
        kv_bits: c.kv_bits,
        kv_group_size: c.kv_group_size,
        act_bits: c.act_bits,
        poq: c.poq,
        dequantized: a.dequantize,
        file_bytes: std::fs::metadata(&a.out)?.len(),
    };
    let text = format!(
        "wrote {} ({} setting, {} bytes)\n",
        a.out.display(),
        report.setting,
        report.file_bytes
    );
    out.emit(&report, text)
}

pub fn calibrate(a: CalibrateArgs, out: &Output) -> Result<()> {
    let m = load(&a.checkpoint)?;
    let tokens = read_corpus(&a.corpus)?;
    let cfg = calib_config(&a.calib);
    let (q, report) = calib::calibrate_model(&m, &tokens, &cfg)?;
    save(&a.out, &q)?;
    out.emit(&report, render::calibration(&report))
}

pub fn eval(a: EvalArgs, out: &Output) -> Result<()> {
    let mut m = load(&a.checkpoint)?;
    if let Some(mode) = a.mode {
        m = retarget(m, mode, false)?;
    }
    let reference = a.reference.as_deref().map(load).transpose()?;
    let tokens = read_corpus(&a.corpus)?;
    let r = evaluate(&m, reference.as_ref(), &tokens, &eval_options(&a.eval))?;
    out.emit(&r, render::eval(&r))
}

#[derive(Serialize)]
#[serde(untagged)]
enum AnalyzeReport {
    Memory(Vec<analyzer::MemoryRow>),
    Time(Vec<analyzer::TimeRow>),
    Single {
        config: DeployConfig,
        phase: Phase,
        memory: analyzer::MemoryBreakdown,
        time: Option<analyzer::TimeEstimate>,
    },
}

pub fn analyze(a: AnalyzeArgs, out: &Output) -> Result<()> {
    let report = match a.preset {
        Some(Preset::Table7) => AnalyzeReport::Memory(analyzer::table7()?),
        Some(Preset::Fig3) => AnalyzeReport::Time(analyzer::fig3()?),
        None => {
            let cfg = match &a.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str::<DeployConfig>(&text).map_err(kvq::Error::from)?
                }
                None => {
                    let mut c = DeployConfig::new(
                        Architecture::preset(&a.arch)?,
                        Setting::parse(&a.setting)?,
                        a.batch,
                        a.len,
                        a.gen,
                    );
                    if let Some(b) = a.bandwidth {
                        c.bandwidth = b;
                    }
                    c
                }
            };
            let phase = match a.phase {
                PhaseArg::Prefill => Phase::Prefill,
                PhaseArg::Decode => Phase::Decode,
            };
            let memory = analyzer::estimate_memory(&cfg, phase)?;
            let time = (cfg.gen_len > 0).then(|| analyzer::estimate_decode_time(&cfg)).transpose()?;
            AnalyzeReport::Single {
                config: cfg,
                phase,
                memory,
                time,
            }
        }
    };
    let text = match &report {
        AnalyzeReport::Memory(rows) => render::memory_rows(rows),
        AnalyzeReport::Time(rows) => render::time_rows(rows),
        AnalyzeReport::Single {
            config,
            phase,
            memory,
            time,
        } => render::single_analysis(config, *phase, memory, time.as_ref()),
    };
    if let Some(p) = &a.csv {
        let mut w = csv::Writer::from_path(p)?;
        match &report {
            AnalyzeReport::Memory(rows) => rows.iter().try_for_each(|r| w.serialize(r))?,
            AnalyzeReport::Time(rows) => rows.iter().try_for_each(|r| w.serialize(r))?,
            AnalyzeReport::Single { memory, .. } => w.serialize(render::MemoryCsv::from(memory))?,
        }
        w.flush()?;
    }
    out.emit(&report, text)
}

fn techniques(names: &[String]) -> Result<Vec<Technique>> {
    Ok(names.iter().map(|n| n.parse::<Technique>()).collect::<kvq::Result<_>>()?)
}

pub fn ablate(a: AblateArgs, out: &Output) -> Result<()> {
    let fp = load(&a.checkpoint)?;
    let calib_tokens = read_corpus(&a.corpus)?;
    let eval_tokens = match &a.eval_corpus {
        Some(p) => read_corpus(p)?,
        None => calib_tokens.clone(),
    };
    let drop = techniques(&a.drop)?;
    let add = techniques(&a.add)?;
    let base = if add.is_empty() { Techniques::ALL } else { Techniques::NONE };
    let h = Harness {
        fp: &fp,
        calib_tokens: &calib_tokens,
        eval_tokens: &eval_tokens,
        calib: calib_config(&a.calib),
        eval: eval_options(&a.eval),
    };
    let r = h.ablate(base, &drop, &add)?;
    out.emit(&r, render::ablation(&r))
}

pub fn sweep_k(a: SweepArgs, out: &Output) -> Result<()> {
    let m = load(&a.checkpoint)?;
    let calib_tokens = read_corpus(&a.corpus)?;
    let eval_tokens = match &a.eval_corpus {
        Some(p) => read_corpus(p)?,
        None => calib_tokens.clone(),
    };
    let r = calib::sweep_k(
        &m,
        &calib_tokens,
        &eval_tokens,
        &a.k_values,
        &calib_config(&a.calib),
        &eval_options(&a.eval),
    )?;
    out.emit(&r, render::sweep(&r))
}

#[derive(Serialize)]
struct GenerateReport {
    setting: String,
    prompt: String,
    ids: Vec<usize>,
    text: String,
}

pub fn generate(a: GenerateArgs, out: &Output) -> Result<()> {
    let m = load(&a.checkpoint)?;
    let mut prompt = vec![kvq::corpus::BOS];
    prompt.extend(kvq::corpus::encode(a.prompt.as_bytes()));
    let ids = m.generate(&prompt, a.n)?;
    let text = String::from_utf8_lossy(&kvq::corpus::decode(&ids[1..])).into_owned();
    let r = GenerateReport {
        setting: setting_label(&m),
        prompt: a.prompt,
        ids,
        text,
    };
    let t = format!("{}\n", r.text);
    out.emit(&r, t)
}

#[derive(Serialize)]
struct FitOutput {
    arch: ModelConfig,
    config: FitConfig,
    first_loss: f32,
    final_loss: f32,
    losses: Vec<f32>,
}

pub fn fit(a: FitArgs, out: &Output) -> Result<()> {
    let m = match &a.checkpoint {
        Some(p) => load(p)?,
        None => {
            let cfg = match a.arch {
                ArchArg::Desk => ModelConfig::desk(),
                ArchArg::Tiny => ModelConfig::tiny(),
            };
            Model::random(cfg, a.seed)?
        }
    };
    let tokens = read_corpus(&a.corpus)?;
    let cfg = FitConfig {
        steps: a.steps,
        batch: a.batch,
        seq_len: a.seq_len,
        lr: a.lr,
        warmup: (a.steps / 10).max(1),
        seed: a.seed,
        ..FitConfig::default()
    };
    let (fitted, report) = kvq::fit::fit(&m, &tokens, &cfg)?;
    save(&a.out, &fitted)?;
    let r = FitOutput {
        arch: fitted.config.clone(),
        first_loss: report.losses.first().copied().unwrap_or(f32::NAN),
        final_loss: report.losses.last().copied().unwrap_or(f32::NAN),
        losses: report.losses,
        config: cfg,
    };
    let text = format!(
        "fit {} steps: loss {:.4} -> {:.4}; wrote {}\n",
        r.losses.len(),
        r.first_loss,
        r.final_loss,
        a.out.display()
    );
    out.emit(&r, text)
}
