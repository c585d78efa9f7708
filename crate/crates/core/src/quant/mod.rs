//! Quantization math: per-channel smoothing with absorption, dynamic
//! per-token group quantization for KV activations, and clipped group-wise
//! weight quantization.

pub mod smoothing;
pub mod token;
pub mod weight;

pub use smoothing::{Direction, SmoothingParams, MIN_SCALE};
pub use token::{fake_quantize_token, quantize_token, TokenQuantSpec, TokenQuantized, TokenScheme};
pub use weight::{quantize_weight, WeightGrid, WeightQuantSpec, WeightQuantized};

use crate::error::Result;
use crate::tensor::Tensor;

/// Integer codes plus the per-group affine parameters needed to recover them.
#[derive(Clone, Debug, PartialEq)]
pub enum QuantizedTensor {
    Token(TokenQuantized),
    Weight(WeightQuantized),
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Tensor {
        match self {
            QuantizedTensor::Token(q) => q.dequantize(),
            QuantizedTensor::Weight(q) => q.dequantize(),
        }
    }

    pub fn codes_in_range(&self) -> bool {
        match self {
            QuantizedTensor::Token(q) => q.codes_in_range(),
            QuantizedTensor::Weight(q) => q.codes_in_range(),
        }
    }
}

impl From<TokenQuantized> for QuantizedTensor {
    fn from(q: TokenQuantized) -> Self {
        QuantizedTensor::Token(q)
    }
}

impl From<WeightQuantized> for QuantizedTensor {
    fn from(q: WeightQuantized) -> Self {
        QuantizedTensor::Weight(q)
    }
}

/// Either a dense tensor or codes that are dequantized on the way in.
pub enum KvInput<'a> {
    Dense(&'a Tensor),
    Quantized(&'a QuantizedTensor),
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    q.dequantize()
}

pub fn apply_kv_smoothing(
    y: KvInput<'_>,
    sp: &SmoothingParams,
    direction: Direction,
) -> Result<Tensor> {
    match y {
        KvInput::Dense(t) => sp.apply(t, direction),
        KvInput::Quantized(q) => sp.apply(&q.dequantize(), direction),
    }
}
