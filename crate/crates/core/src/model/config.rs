use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{TokenQuantSpec, TokenScheme, WeightGrid, WeightQuantSpec};

/// Which tensors are quantized at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    Fp,
    WeightOnly,
    WeightKv,
    WeightActivation,
}

impl QuantMode {
    pub fn label(&self) -> &'static str {
        match self {
            QuantMode::Fp => "fp",
            QuantMode::WeightOnly => "weight_only",
            QuantMode::WeightKv => "weight_kv",
            QuantMode::WeightActivation => "weight_activation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_size: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub intermediate_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_base: f32,
    pub norm_eps: f32,
    pub quant_mode: QuantMode,
    pub weight_bits: u32,
    pub weight_group_size: usize,
    pub weight_grid: WeightGrid,
    /// 2..=8 for integer codes, 16 for half-precision storage, 32 for lossless.
    pub kv_bits: u32,
    pub kv_group_size: usize,
    pub kv_scheme: TokenScheme,
    /// Past-only quantization: attention uses the current step's K/V
    /// unquantized. Off reproduces quantize-everything caching.
    pub poq: bool,
    /// Per-token bits for linear-layer inputs in `weight_activation` mode
    /// (32 disables).
    pub act_bits: u32,
    /// Cache keys after the rotary embedding instead of before it.
    pub cache_post_rotary: bool,
}

impl ModelConfig {
    /// Default desk-scale model.
    pub fn desk() -> Self {
        ModelConfig {
            n_layers: 4,
            hidden_size: 128,
            n_heads: 4,
            head_dim: 32,
            intermediate_size: 344,
            vocab_size: crate::corpus::VOCAB_SIZE,
            max_seq_len: 512,
            rope_base: 10000.0,
            norm_eps: 1e-5,
            quant_mode: QuantMode::Fp,
            weight_bits: 4,
            weight_group_size: 128,
            weight_grid: WeightGrid::Full,
            kv_bits: 4,
            kv_group_size: 128,
            kv_scheme: TokenScheme::Shifted,
            poq: true,
            act_bits: 4,
            cache_post_rotary: false,
        }
    }

    /// A smaller variant used by tests and the statistical harnesses.
    pub fn tiny() -> Self {
        ModelConfig {
            hidden_size: 64,
            n_heads: 4,
            head_dim: 16,
            intermediate_size: 172,
            max_seq_len: 128,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.head_dim == 0 {
            return bad("layer, head and head_dim counts must be positive".into());
        }
        if self.hidden_size != self.n_heads * self.head_dim {
            return bad(format!(
                "hidden_size {} != n_heads {} * head_dim {}",
                self.hidden_size, self.n_heads, self.head_dim
            ));
        }
        if self.head_dim % 2 != 0 {
            return bad(format!("head_dim {} must be even for the rotary embedding", self.head_dim));
        }
        if self.intermediate_size == 0 {
            return bad("intermediate_size must be positive".into());
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be >= 1".into());
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be >= 2".into());
        }
        if !(self.rope_base > 1.0) || !(self.norm_eps > 0.0) {
            return bad("rope_base must exceed 1 and norm_eps must be positive".into());
        }
        self.weight_spec().validate()?;
        if !matches!(self.kv_bits, 2..=8 | 16 | 32) {
            return bad(format!("kv_bits must be 2..=8, 16 or 32, got {}", self.kv_bits));
        }
        if self.kv_group_size == 0 {
            return bad("kv_group_size must be positive".into());
        }
        if !matches!(self.act_bits, 2..=8 | 32) {
            return bad(format!("act_bits must be 2..=8 or 32, got {}", self.act_bits));
        }
        Ok(())
    }

    pub fn weight_spec(&self) -> WeightQuantSpec {
        WeightQuantSpec {
            bits: self.weight_bits,
            group_size: self.weight_group_size,
            grid: self.weight_grid,
        }
    }

    /// Integer KV spec, or `None` for the 16/32-bit storage modes.
    pub fn kv_spec(&self) -> Option<TokenQuantSpec> {
        (self.kv_bits <= 8).then_some(TokenQuantSpec {
            bits: self.kv_bits,
            group_size: self.kv_group_size,
            scheme: self.kv_scheme,
        })
    }

    /// Whether cached K/V are stored lossy at all.
    pub fn quantizes_kv(&self) -> bool {
        self.quant_mode == QuantMode::WeightKv && self.kv_bits < 32
    }

    pub fn quantizes_weights(&self) -> bool {
        self.quant_mode != QuantMode::Fp
    }

    /// Per-token absmax spec for linear-layer inputs of width `cols`.
    pub fn act_spec(&self, cols: usize) -> Option<TokenQuantSpec> {
        (self.quant_mode == QuantMode::WeightActivation && self.act_bits <= 8).then_some(
            TokenQuantSpec {
                bits: self.act_bits,
                group_size: cols,
                scheme: TokenScheme::Absmax,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn inconsistent_heads_rejected() {
        let cfg = ModelConfig {
            head_dim: 30,
            ..ModelConfig::desk()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kv_storage_selection() {
        let mut cfg = ModelConfig::desk();
        assert!(!cfg.quantizes_kv());
        cfg.quant_mode = QuantMode::WeightKv;
        assert!(cfg.quantizes_kv());
        cfg.kv_bits = 32;
        assert!(!cfg.quantizes_kv());
        assert!(cfg.kv_spec().is_none());
        cfg.kv_bits = 12;
        assert!(cfg.validate().is_err());
    }
}
