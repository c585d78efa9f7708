//! `kvq`: quantize, calibrate, evaluate and analyze small decoder models.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or file
//! format error, 4 numeric failure.

mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "kvq", version, about = "Weight and KV-cache post-training quantization toolkit")]
struct Cli {
    /// Print the report as JSON instead of text.
    #[arg(long, global = true)]
    json: bool,

    /// Also write the JSON report to this file.
    #[arg(long, global = true, value_name = "PATH")]
    report: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a full-precision checkpoint (or re-target a calibrated one).
    Quantize(QuantizeArgs),
    /// Learn clipping and smoothing parameters block by block.
    Calibrate(CalibrateArgs),
    /// Perplexity and divergence from a reference model.
    Eval(EvalArgs),
    /// Memory and decode-time estimates for full-size architectures.
    Analyze(AnalyzeArgs),
    /// Switch individual techniques on or off and compare.
    Ablate(AblateArgs),
    /// Calibrate once per cross-block depth and compare.
    SweepK(SweepArgs),
    /// Greedy generation.
    Generate(GenerateArgs),
    /// Briefly train a model on a corpus (creating it if needed).
    Fit(FitArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Fp,
    W4,
    W4kv4,
    W4a4,
    Rtn,
}

#[derive(Args)]
struct QuantizeArgs {
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    /// Weight bits; 16 or 32 leave the weights unquantized.
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    kv_bits: Option<u32>,
    #[arg(long)]
    act_bits: Option<u32>,
    /// Weight group size (input channels per group).
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    kv_group_size: Option<usize>,
    /// The input is a calibrated checkpoint whose learned parameters and
    /// weight codes are kept.
    #[arg(long)]
    calibrated: bool,
    /// Write a full-precision checkpoint holding the dequantized weights.
    #[arg(long)]
    dequantize: bool,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct CalibArgs {
    /// Cross-block depth.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    segments: usize,
    /// Segment length in tokens, including the leading BOS.
    #[arg(long, default_value_t = 256)]
    seg_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Loss::Mae)]
    loss: Loss,
    #[arg(long, default_value_t = 5e-4)]
    lr_smoothing: f32,
    #[arg(long, default_value_t = 1e-2)]
    lr_clipping: f32,
    /// Feed each block the outputs of the already quantized blocks.
    #[arg(long)]
    quantized_inputs: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Loss {
    Mae,
    Mse,
}

#[derive(Args)]
struct CalibrateArgs {
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    calib: CalibArgs,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct EvalFlags {
    /// Score token by token through the KV cache.
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true", action = clap::ArgAction::Set)]
    use_cache: bool,
    /// Score at most this many windows.
    #[arg(long)]
    max_windows: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Inference mode; a full-precision checkpoint is quantized on the fly.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Full-precision checkpoint for logit MAE and first divergence.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    Table7,
    Fig3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PhaseArg {
    Prefill,
    Decode,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Architecture preset (llama-2-7b, llama-2-13b).
    #[arg(long, default_value = "llama-2-7b")]
    arch: String,
    /// JSON deployment configuration; overrides the other options.
    #[arg(long)]
    config: Option<PathBuf>,
    /// fp16, w4, w4kv4 or w4a4.
    #[arg(long, default_value = "fp16")]
    setting: String,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Prompt length.
    #[arg(long, default_value_t = 2048)]
    len: usize,
    /// Generated tokens.
    #[arg(long, default_value_t = 0)]
    gen: usize,
    #[arg(long, value_enum, default_value_t = PhaseArg::Decode)]
    phase: PhaseArg,
    /// Memory bandwidth in bytes per second.
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Write the rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Full-precision checkpoint.
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Evaluation corpus (defaults to the calibration corpus).
    #[arg(long)]
    eval_corpus: Option<PathBuf>,
    /// Techniques to switch off the full method: lwc, 2dq-channel,
    /// 2dq-token, poq.
    #[arg(long, value_delimiter = ',')]
    drop: Vec<String>,
    /// Techniques to switch on over plain round-to-nearest.
    #[arg(long, value_delimiter = ',', conflicts_with = "drop")]
    add: Vec<String>,
    #[command(flatten)]
    calib: CalibArgs,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Args)]
struct SweepArgs {
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    eval_corpus: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    k_values: Vec<usize>,
    #[command(flatten)]
    calib: CalibArgs,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Args)]
struct GenerateArgs {
    checkpoint: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(short, long, default_value_t = 32)]
    n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ArchArg {
    Desk,
    Tiny,
}

#[derive(Args)]
struct FitArgs {
    /// Starting checkpoint; a fresh model is created when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Architecture of a fresh model.
    #[arg(long, value_enum, default_value_t = ArchArg::Desk)]
    arch: ArchArg,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f32,
    /// Seeds both the fresh model's initialization and segment sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use kvq::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::Contract(_) | E::Capacity { .. } => 2,
                E::Data(_) | E::Format { .. } | E::Io(_) | E::Json(_) => 3,
                E::Shape { .. } | E::DegenerateScale { .. } | E::NonFinite { .. } | E::Accounting { .. } => 4,
            };
        }
        if cause.downcast_ref::<commands::UsageError>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<csv::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("KVQ_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| commands::UsageError(format!("KVQ_THREADS must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(commands::UsageError("KVQ_THREADS must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let run = || -> anyhow::Result<()> {
        init_threads()?;
        let out = commands::Output {
            json: cli.json,
            report: cli.report.clone(),
        };
        match cli.command {
            Command::Quantize(a) => commands::quantize(a, &out),
            Command::Calibrate(a) => commands::calibrate(a, &out),
            Command::Eval(a) => commands::eval(a, &out),
            Command::Analyze(a) => commands::analyze(a, &out),
            Command::Ablate(a) => commands::ablate(a, &out),
            Command::SweepK(a) => commands::sweep_k(a, &out),
            Command::Generate(a) => commands::generate(a, &out),
            Command::Fit(a) => commands::fit(a, &out),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
