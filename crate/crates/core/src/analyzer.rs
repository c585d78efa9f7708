//! Analytical memory and memory-bound decode-latency model.
//!
//! Memory is counted in three classes: weights, KV cache and temporary
//! activations. Every quantized class carries two 16-bit parameters (scale
//! and offset) per group. Latency follows a roofline in which each decode
//! step streams the weights, the cache read so far, and the step's
//! temporary activations through memory once.
//!
//! The temporary-activation live set is an approximation: `batch × tokens ×
//! (4·hidden + 2·intermediate)` elements for the tokens processed in one
//! step (the whole prompt in prefill, one token in decode), plus one
//! attention-score tile of `batch × heads × seq` elements kept at 16 bits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KvStorage, Model, ModelConfig};

pub const GIB: f64 = (1u64 << 30) as f64;

/// Bits of one group parameter (scale or offset).
pub const PARAM_BITS: u64 = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub n_layers: usize,
    pub hidden_size: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub intermediate_size: usize,
    pub vocab_size: usize,
    /// Key and value projections carry a bias (the desk models do).
    #[serde(default)]
    pub kv_bias: bool,
}

impl Architecture {
    pub fn llama2_7b() -> Self {
        Architecture {
            name: "llama-2-7b".into(),
            n_layers: 32,
            hidden_size: 4096,
            n_heads: 32,
            head_dim: 128,
            intermediate_size: 11008,
            vocab_size: 32000,
            kv_bias: false,
        }
    }

    pub fn llama2_13b() -> Self {
        Architecture {
            name: "llama-2-13b".into(),
            n_layers: 40,
            hidden_size: 5120,
            n_heads: 40,
            head_dim: 128,
            intermediate_size: 13824,
            vocab_size: 32000,
            kv_bias: false,
        }
    }

    pub fn of_model(cfg: &ModelConfig) -> Self {
        Architecture {
            name: "desk".into(),
            n_layers: cfg.n_layers,
            hidden_size: cfg.hidden_size,
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim,
            intermediate_size: cfg.intermediate_size,
            vocab_size: cfg.vocab_size,
            kv_bias: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "llama-2-7b" | "7b" => Ok(Self::llama2_7b()),
            "llama-2-13b" | "13b" => Ok(Self::llama2_13b()),
            _ => Err(Error::Config(format!(
                "unknown architecture preset '{name}' (expected llama-2-7b or llama-2-13b)"
            ))),
        }
    }

    fn kv_width(&self) -> u64 {
        (self.n_heads * self.head_dim) as u64
    }
}

/// Named bit-width settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setting {
    #[serde(rename = "FP16")]
    Fp16,
    #[serde(rename = "W4")]
    W4,
    #[serde(rename = "W4KV4")]
    W4Kv4,
    #[serde(rename = "W4A4")]
    W4A4,
}

impl Setting {
    pub const ALL: [Setting; 4] = [Setting::Fp16, Setting::W4, Setting::W4Kv4, Setting::W4A4];

    pub fn label(&self) -> &'static str {
        match self {
            Setting::Fp16 => "FP16",
            Setting::W4 => "W4",
            Setting::W4Kv4 => "W4KV4",
            Setting::W4A4 => "W4A4",
        }
    }

    /// `(weight, kv, activation)` bits. Activation quantization covers the
    /// KV cache as well.
    pub fn bits(&self) -> (u32, u32, u32) {
        match self {
            Setting::Fp16 => (16, 16, 16),
            Setting::W4 => (4, 16, 16),
            Setting::W4Kv4 => (4, 4, 16),
            Setting::W4A4 => (4, 4, 4),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|x| x.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown setting '{s}' (expected fp16, w4, w4kv4 or w4a4)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeployConfig {
    pub arch: Architecture,
    pub batch: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub weight_bits: u32,
    pub kv_bits: u32,
    pub act_bits: u32,
    pub weight_group_size: usize,
    pub kv_group_size: usize,
    /// Count the embedding and output head at `weight_bits` instead of 16.
    pub quantize_embeddings: bool,
    /// Memory bandwidth in bytes per second.
    pub bandwidth: f64,
}

impl DeployConfig {
    pub fn new(arch: Architecture, setting: Setting, batch: usize, prompt_len: usize, gen_len: usize) -> Self {
        let (w, kv, a) = setting.bits();
        DeployConfig {
            arch,
            batch,
            prompt_len,
            gen_len,
            weight_bits: w,
            kv_bits: kv,
            act_bits: a,
            weight_group_size: 128,
            kv_group_size: 128,
            quantize_embeddings: false,
            bandwidth: 2.0e12,
        }
    }

    pub fn with_setting(&self, setting: Setting) -> Self {
        let (w, kv, a) = setting.bits();
        DeployConfig {
            weight_bits: w,
            kv_bits: kv,
            act_bits: a,
            ..self.clone()
        }
    }

    /// The desk model's own configuration: its cache storage width decides
    /// `kv_bits`, and the batch is one stream of `tokens` cached positions.
    pub fn of_model(cfg: &ModelConfig, tokens: usize) -> Self {
        DeployConfig {
            arch: Architecture::of_model(cfg),
            batch: 1,
            prompt_len: tokens,
            gen_len: 0,
            weight_bits: if cfg.quantizes_weights() { cfg.weight_bits } else { 32 },
            kv_bits: KvStorage::of(cfg).bits(),
            act_bits: cfg.act_spec(cfg.hidden_size).map_or(32, |s| s.bits),
            weight_group_size: cfg.weight_group_size,
            kv_group_size: cfg.kv_group_size,
            quantize_embeddings: false,
            bandwidth: 2.0e12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        let counts = [
            ("n_layers", a.n_layers),
            ("hidden_size", a.hidden_size),
            ("n_heads", a.n_heads),
            ("head_dim", a.head_dim),
            ("intermediate_size", a.intermediate_size),
            ("vocab_size", a.vocab_size),
            ("batch", self.batch),
            ("weight_group_size", self.weight_group_size),
            ("kv_group_size", self.kv_group_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        for (name, b) in [
            ("weight_bits", self.weight_bits),
            ("kv_bits", self.kv_bits),
            ("act_bits", self.act_bits),
        ] {
            if !matches!(b, 2..=8 | 16 | 32) {
                return Err(Error::Config(format!("{name} must be 2..=8, 16 or 32, got {b}")));
            }
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
        Ok(())
    }
}

/// Bytes of `rows × cols` values at `bits`, grouped along rows of `cols`
/// in groups of `group` with two 16-bit parameters each when `bits <= 8`.
/// Each row's codes are padded to a whole byte.
fn packed_bytes(rows: u64, cols: u64, bits: u32, group: usize) -> u64 {
    if bits > 8 {
        return rows * cols * bits as u64 / 8;
    }
    let groups = cols.div_ceil(group as u64);
    rows * ((cols * bits as u64).div_ceil(8) + groups * 2 * PARAM_BITS / 8)
}

/// Bytes of a `[c_in, c_out]` weight matrix grouped along `c_in`.
fn matrix_bytes(c_in: u64, c_out: u64, bits: u32, group: usize) -> u64 {
    // Stored transposed: one row per output channel.
    packed_bytes(c_out, c_in, bits, group)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proportions {
    pub weights: f64,
    pub kv_cache: f64,
    pub temp_activation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub weights_bytes: u64,
    pub kv_cache_bytes: u64,
    pub temp_activation_bytes: u64,
    pub total_bytes: u64,
    pub proportions: Proportions,
}

impl MemoryBreakdown {
    pub fn total_gib(&self) -> f64 {
        self.total_bytes as f64 / GIB
    }
}

pub fn weights_bytes(cfg: &DeployConfig) -> u64 {
    let a = &cfg.arch;
    let (h, i, v, kv) = (
        a.hidden_size as u64,
        a.intermediate_size as u64,
        a.vocab_size as u64,
        a.kv_width(),
    );
    let (b, g) = (cfg.weight_bits, cfg.weight_group_size);
    let attn = matrix_bytes(h, kv, b, g) * 3 + matrix_bytes(kv, h, b, g);
    let mlp = matrix_bytes(h, i, b, g) * 2 + matrix_bytes(i, h, b, g);
    // Norm gains and biases stay at 16 bits.
    let small = 2 * h + if a.kv_bias { 2 * kv } else { 0 };
    let per_layer = attn + mlp + small * 2;
    let eb = if cfg.quantize_embeddings { b } else { 16 };
    let embed = matrix_bytes(v, h, eb, g) + matrix_bytes(h, v, eb, g);
    per_layer * a.n_layers as u64 + embed + h * 2
}

/// KV cache bytes for `seq` cached positions per stream.
pub fn kv_cache_bytes(cfg: &DeployConfig, seq: usize) -> u64 {
    let a = &cfg.arch;
    let rows = 2 * a.n_layers as u64 * cfg.batch as u64 * seq as u64;
    packed_bytes(rows, a.kv_width(), cfg.kv_bits, cfg.kv_group_size)
}

/// Peak temporary-activation bytes while processing `tokens` new positions
/// per stream against `seq` total positions. Quantized activations carry
/// one group per tensor row; attention scores are never quantized.
pub fn temp_activation_bytes(cfg: &DeployConfig, tokens: usize, seq: usize) -> u64 {
    if tokens == 0 {
        return 0;
    }
    let a = &cfg.arch;
    let (h, i) = (a.hidden_size as u64, a.intermediate_size as u64);
    let live = cfg.batch as u64 * tokens as u64;
    let b = cfg.act_bits;
    let rows = packed_bytes(4 * live, h, b, h as usize) + packed_bytes(2 * live, i, b, i as usize);
    rows + cfg.batch as u64 * a.n_heads as u64 * seq as u64 * 2
}

pub fn estimate_memory(cfg: &DeployConfig, phase: Phase) -> Result<MemoryBreakdown> {
    cfg.validate()?;
    let (tokens, seq) = match phase {
        Phase::Prefill => (cfg.prompt_len, cfg.prompt_len),
        Phase::Decode => (1.min(cfg.prompt_len + cfg.gen_len), cfg.prompt_len + cfg.gen_len),
    };
    let w = weights_bytes(cfg);
    let kv = kv_cache_bytes(cfg, seq);
    let t = temp_activation_bytes(cfg, tokens, seq);
    let total = w + kv + t;
    let f = |x: u64| x as f64 / total as f64;
    Ok(MemoryBreakdown {
        weights_bytes: w,
        kv_cache_bytes: kv,
        temp_activation_bytes: t,
        total_bytes: total,
        proportions: Proportions {
            weights: f(w),
            kv_cache: f(kv),
            temp_activation: f(t),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeEstimate {
    /// Total bytes streamed over all decode steps.
    pub bytes_moved: f64,
    pub total_seconds: f64,
    pub seconds_per_token: f64,
    /// Total time relative to the same configuration at FP16.
    pub ratio_vs_fp16: f64,
}

fn decode_bytes(cfg: &DeployConfig) -> f64 {
    let w = weights_bytes(cfg) as f64;
    (0..cfg.gen_len)
        .map(|t| {
            let seq = cfg.prompt_len + t + 1;
            // Activations are written and read back once per step.
            w + kv_cache_bytes(cfg, seq) as f64 + 2.0 * temp_activation_bytes(cfg, 1, seq) as f64
        })
        .sum()
}

/// Memory-bound time to generate `gen_len` tokens after the prompt.
pub fn estimate_decode_time(cfg: &DeployConfig) -> Result<TimeEstimate> {
    cfg.validate()?;
    if cfg.gen_len == 0 {
        return Err(Error::Config("decode time needs gen_len >= 1".into()));
    }
    let bytes = decode_bytes(cfg);
    let fp = decode_bytes(&cfg.with_setting(Setting::Fp16));
    let total = bytes / cfg.bandwidth;
    Ok(TimeEstimate {
        bytes_moved: bytes,
        total_seconds: total,
        seconds_per_token: total / cfg.gen_len as f64,
        ratio_vs_fp16: bytes / fp,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountingReport {
    pub tokens: usize,
    pub kv_bits: u32,
    pub analyzer_bytes: u64,
    pub runtime_bytes: u64,
}

/// Prefills `ids` and compares the cache's buffer bytes with the analyzer's
/// KV formula for the same configuration.
pub fn verify_runtime_accounting(model: &Model, ids: &[usize]) -> Result<AccountingReport> {
    let (_, cache) = model.prefill(ids)?;
    let cfg = DeployConfig::of_model(&model.config, cache.len());
    let analyzer = kv_cache_bytes(&cfg, cache.len());
    let runtime = cache.bytes() as u64;
    if analyzer != runtime {
        return Err(Error::Accounting { analyzer, runtime });
    }
    Ok(AccountingReport {
        tokens: cache.len(),
        kv_bits: cfg.kv_bits,
        analyzer_bytes: analyzer,
        runtime_bytes: runtime,
    })
}

/// One row of the memory table: total decode-phase GiB per setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub model: String,
    pub batch: usize,
    pub len: usize,
    pub fp16_gib: f64,
    pub w4_gib: f64,
    pub w4kv4_gib: f64,
    pub w4a4_gib: f64,
}

pub fn memory_row(arch: Architecture, batch: usize, len: usize) -> Result<MemoryRow> {
    let base = DeployConfig::new(arch, Setting::Fp16, batch, len, 0);
    let gib = |s: Setting| -> Result<f64> { Ok(estimate_memory(&base.with_setting(s), Phase::Decode)?.total_gib()) };
    Ok(MemoryRow {
        model: base.arch.name.clone(),
        batch,
        len,
        fp16_gib: gib(Setting::Fp16)?,
        w4_gib: gib(Setting::W4)?,
        w4kv4_gib: gib(Setting::W4Kv4)?,
        w4a4_gib: gib(Setting::W4A4)?,
    })
}

/// Decode-phase memory of the 7b and 13b architectures at (batch 1, 2048),
/// (batch 1, 9012) and (batch 16, 2048) cached positions.
pub fn table7() -> Result<Vec<MemoryRow>> {
    let mut rows = Vec::new();
    for (batch, len) in [(1, 2048), (1, 9012), (16, 2048)] {
        for arch in [Architecture::llama2_7b(), Architecture::llama2_13b()] {
            rows.push(memory_row(arch, batch, len)?);
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeRow {
    pub setting: Setting,
    pub total_seconds: f64,
    pub ratio_vs_fp16: f64,
}

/// Relative time to generate 2048 tokens after a 2048-token prompt on the
/// 13b architecture at batch 1.
pub fn fig3() -> Result<Vec<TimeRow>> {
    let base = DeployConfig::new(Architecture::llama2_13b(), Setting::Fp16, 1, 2048, 2048);
    Setting::ALL
        .into_iter()
        .map(|s| {
            let t = estimate_decode_time(&base.with_setting(s))?;
            Ok(TimeRow {
                setting: s,
                total_seconds: t.total_seconds,
                ratio_vs_fp16: t.ratio_vs_fp16,
            })
        })
        .collect()
}

/// Smallest `(batch, len)` on a doubling grid at which the KV cache
/// outweighs the weights.
pub fn kv_crossover(cfg: &DeployConfig, max_batch: usize, max_len: usize) -> Option<(usize, usize)> {
    let w = weights_bytes(cfg);
    let mut batch = 1;
    while batch <= max_batch {
        let mut len = 1;
        while len <= max_len {
            let c = DeployConfig { batch, ..cfg.clone() };
            if kv_cache_bytes(&c, len) > w {
                return Some((batch, len));
            }
            len *= 2;
        }
        batch *= 2;
    }
    None
}
