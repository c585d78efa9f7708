//! Weight and KV-cache post-training quantization for small decoder-only
//! transformers.

pub mod ablation;
pub mod analyzer;
pub mod autodiff;
pub mod calib;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod fit;
pub mod model;
pub mod optim;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
