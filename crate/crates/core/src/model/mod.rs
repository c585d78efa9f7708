//! A small LLaMA-style decoder: RMS-norm pre-norm blocks with rotary
//! multi-head attention and a gated SiLU MLP, an untied output head, and
//! learned biases on the key/value projections (which is where channel
//! smoothing is absorbed).

pub mod block;
pub mod cache;
pub mod config;
mod runtime;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::quant::{quantize_weight, SmoothingParams, WeightQuantSpec, WeightQuantized};
use crate::tensor::Tensor;

pub use block::{BlockDims, BlockVars};
pub use cache::{KvStorage, PoqKvCache};
pub use config::{ModelConfig, QuantMode};
pub use runtime::argmax;
pub(crate) use runtime::to_raw_var;

/// Names of a block's quantizable projections.
pub const LINEARS: [&str; 7] = ["wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"];

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Arc<Tensor>,
    pub wq: Arc<Tensor>,
    pub wk: Arc<Tensor>,
    pub bk: Arc<Tensor>,
    pub wv: Arc<Tensor>,
    pub bv: Arc<Tensor>,
    pub wo: Arc<Tensor>,
    pub mlp_norm: Arc<Tensor>,
    pub w_gate: Arc<Tensor>,
    pub w_up: Arc<Tensor>,
    pub w_down: Arc<Tensor>,
    pub k_smooth: SmoothingParams,
    pub v_smooth: SmoothingParams,
}

impl LayerWeights {
    pub fn linear(&self, name: &str) -> Result<&Arc<Tensor>> {
        Ok(match name {
            "wq" => &self.wq,
            "wk" => &self.wk,
            "wv" => &self.wv,
            "wo" => &self.wo,
            "w_gate" => &self.w_gate,
            "w_up" => &self.w_up,
            "w_down" => &self.w_down,
            other => return Err(Error::Config(format!("unknown projection {other:?}"))),
        })
    }

    pub fn linear_mut(&mut self, name: &str) -> Result<&mut Arc<Tensor>> {
        Ok(match name {
            "wq" => &mut self.wq,
            "wk" => &mut self.wk,
            "wv" => &mut self.wv,
            "wo" => &mut self.wo,
            "w_gate" => &mut self.w_gate,
            "w_up" => &mut self.w_up,
            "w_down" => &mut self.w_down,
            other => return Err(Error::Config(format!("unknown projection {other:?}"))),
        })
    }

    /// All tensors under their checkpoint names.
    pub fn named(&self) -> Vec<(&'static str, &Arc<Tensor>)> {
        vec![
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("mlp_norm", &self.mlp_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    /// Mutable handles in [`LayerWeights::named`] order.
    pub fn tensors_mut(&mut self) -> [&mut Arc<Tensor>; 11] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }

    /// Registers every tensor on `g`, as trainable parameters or constants.
    pub fn vars(&self, g: &mut Graph, trainable: bool) -> BlockVars {
        let mut leaf = |t: &Arc<Tensor>| {
            if trainable {
                g.param(Arc::clone(t))
            } else {
                g.constant(Arc::clone(t))
            }
        };
        BlockVars {
            attn_norm: leaf(&self.attn_norm),
            wq: leaf(&self.wq),
            wk: leaf(&self.wk),
            bk: leaf(&self.bk),
            wv: leaf(&self.wv),
            bv: leaf(&self.bv),
            wo: leaf(&self.wo),
            mlp_norm: leaf(&self.mlp_norm),
            w_gate: leaf(&self.w_gate),
            w_up: leaf(&self.w_up),
            w_down: leaf(&self.w_down),
        }
    }

    /// Folds the K/V smoothing into `wk, bk` / `wv, bv`.
    pub fn absorb_smoothing(&mut self) -> Result<()> {
        if !self.k_smooth.absorbed {
            let (w, b) = self.k_smooth.absorb(&self.wk, &self.bk)?;
            self.wk = Arc::new(w);
            self.bk = Arc::new(b);
        }
        if !self.v_smooth.absorbed {
            let (w, b) = self.v_smooth.absorb(&self.wv, &self.bv)?;
            self.wv = Arc::new(w);
            self.bv = Arc::new(b);
        }
        Ok(())
    }
}

/// Absorbs the layer's smoothing and replaces every projection with its
/// dequantized codes; returns the codes and the clipping used.
pub fn quantize_layer(
    layer: &mut LayerWeights,
    spec: &WeightQuantSpec,
    clip: Option<&BTreeMap<String, ClipParams>>,
) -> Result<LayerQuant> {
    layer.absorb_smoothing()?;
    let mut rec = LayerQuant::default();
    for name in LINEARS {
        let cp = clip.and_then(|m| m.get(name));
        let q = quantize_weight(layer.linear(name)?, spec, cp.map(|c| (&c.gamma, &c.beta)))?;
        *layer.linear_mut(name)? = Arc::new(q.dequantize());
        rec.codes.insert(name.to_string(), q);
        if let Some(c) = cp {
            rec.clip.insert(name.to_string(), c.clone());
        }
    }
    Ok(rec)
}

/// Clipping factors of one projection, mapped values in `(0, 1]`, shaped
/// `[groups, C_out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Integer weight codes and the clipping that produced them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerQuant {
    pub codes: BTreeMap<String, WeightQuantized>,
    pub clip: BTreeMap<String, ClipParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Arc<Tensor>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Arc<Tensor>,
    pub lm_head: Arc<Tensor>,
    /// Present once block weights are quantized; the `Arc<Tensor>` weights
    /// then hold the dequantized codes.
    pub quant: Option<Vec<LayerQuant>>,
}

impl Model {
    /// Randomly initialized full-precision model.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Arc::new(Tensor::randn(config.vocab_size, config.hidden_size, 1.0, &mut rng));
        let (h, i, v) = (config.hidden_size, config.intermediate_size, config.vocab_size);
        let resid = 1.0 / (2.0 * config.n_layers as f32).sqrt();
        // Fan-in scaled normal init; residual branches shrunk with depth.
        let mut mat = |r: usize, c: usize, scale: f32| {
            Arc::new(Tensor::randn(r, c, scale / (r as f32).sqrt(), &mut rng))
        };
        let ones = |c: usize| Arc::new(Tensor::full(1, c, 1.0));
        let zeros = |c: usize| Arc::new(Tensor::zeros(1, c));
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: ones(h),
                wq: mat(h, h, 1.0),
                wk: mat(h, h, 1.0),
                bk: zeros(h),
                wv: mat(h, h, 1.0),
                bv: zeros(h),
                wo: mat(h, h, resid),
                mlp_norm: ones(h),
                w_gate: mat(h, i, 1.0),
                w_up: mat(h, i, 1.0),
                w_down: mat(i, h, resid),
                k_smooth: SmoothingParams::identity(h),
                v_smooth: SmoothingParams::identity(h),
            })
            .collect();
        let lm_head = mat(h, v, 1.0);
        Ok(Model {
            embed,
            layers,
            final_norm: ones(h),
            lm_head,
            quant: None,
            config,
        })
    }

    /// Same weights, different inference mode.
    pub fn with_mode(&self, mode: QuantMode) -> Model {
        let mut m = self.clone();
        m.config.quant_mode = mode;
        m
    }

    pub fn dims(&self) -> BlockDims {
        BlockDims::of(&self.config)
    }

    /// Embedding lookup as a graph constant.
    pub fn embed_tokens(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let table = g.constant(Arc::clone(&self.embed));
        g.embedding(table, ids)
    }

    /// Final norm and output head.
    pub fn head(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let norm = g.constant(Arc::clone(&self.final_norm));
        let h = g.rms_norm(x, norm, self.config.norm_eps)?;
        let w = g.constant(Arc::clone(&self.lm_head));
        g.matmul(h, w)
    }

    /// Round-to-nearest quantization of every block projection (after
    /// absorbing any smoothing), optionally with clipping factors per layer
    /// and projection. Embedding and head stay full precision.
    pub fn quantize_weights(
        &self,
        mode: QuantMode,
        clip: Option<&[BTreeMap<String, ClipParams>]>,
    ) -> Result<Model> {
        let mut out = self.clone();
        out.config.quant_mode = mode;
        let spec = self.config.weight_spec();
        let mut records = Vec::with_capacity(self.layers.len());
        for (li, layer) in out.layers.iter_mut().enumerate() {
            let cp = clip.and_then(|c| c.get(li));
            records.push(quantize_layer(layer, &spec, cp)?);
        }
        out.quant = Some(records);
        Ok(out)
    }

    /// Number of parameters (all tensors).
    pub fn n_params(&self) -> usize {
        let per_layer: usize = self.layers[0].named().iter().map(|(_, t)| t.numel()).sum();
        self.embed.numel() + self.lm_head.numel() + self.final_norm.numel() + per_layer * self.layers.len()
    }
}
