//! Block-by-block calibration of the clipping factors (gamma, beta) and the
//! K/V smoothing (s, delta) against a cross-block reconstruction loss.
//!
//! Block `i` is trained on the raw full-precision inputs `x_i`. The loss
//! compares the output of the fake-quantized block followed by `k - 1`
//! full-precision blocks with the output of `k` full-precision blocks.
//! Once trained, the block's smoothing is absorbed and its weights are
//! replaced by their integer codes before moving on.

mod block;
pub mod stage;
mod sweep;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradCheck, Graph, SurrogateGrad};
use crate::corpus;
use crate::error::{Error, Result};
use crate::model::{quantize_layer, BlockDims, LayerQuant, LayerWeights, Model, QuantMode};
use crate::optim::{AdamConfig, AdamW};
use crate::quant::SmoothingParams;
use crate::tensor::Tensor;

pub use block::{BlockParams, FrozenBlock, ParamSummary, QuantBlock, QuantSettings};
pub use sweep::{sweep_k, SweepReport, SweepRow};
pub use stage::{chain, crr_from_target, crr_loss, effective_k, FpBlock, LinearStage, LossKind, Stage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    /// Blocks spanned by the loss.
    pub k: usize,
    pub epochs: usize,
    /// Calibration segments per optimizer step.
    pub batch_size: usize,
    pub lr_smoothing: f32,
    pub lr_clipping: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub loss: LossKind,
    /// Leave the block's own K/V unquantized while training, as past-only
    /// quantization would during a single prefill.
    pub poq_during_training: bool,
    pub n_segments: usize,
    /// Tokens per segment, including the leading BOS.
    pub seg_len: usize,
    /// Learn clipping factors; off keeps `gamma = beta = 1`.
    pub learn_clipping: bool,
    /// Channel smoothing of K/V; off keeps the identity.
    pub smoothing: bool,
    /// Raw value (before the sigmoid) the clipping factors start from.
    pub clip_init: f32,
    /// Feed block `i` the outputs of the already quantized blocks instead
    /// of the raw full-precision `x_i`.
    pub quantized_inputs: bool,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            k: 5,
            epochs: 5,
            batch_size: 1,
            lr_smoothing: 5e-4,
            lr_clipping: 1e-2,
            weight_decay: 0.0,
            seed: 0,
            loss: LossKind::Mae,
            poq_during_training: false,
            n_segments: 32,
            seg_len: 256,
            learn_clipping: true,
            smoothing: true,
            clip_init: 4.0,
            quantized_inputs: false,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.k < 1 || self.k > n_layers {
            return Err(Error::Config(format!("k must lie in 1..={n_layers}, got {}", self.k)));
        }
        if !(self.lr_smoothing > 0.0 && self.lr_clipping > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.n_segments == 0 || self.seg_len < 2 {
            return Err(Error::Config(
                "batch size and segment count must be positive, segments at least 2 tokens".into(),
            ));
        }
        Ok(())
    }
}

/// Trace of one block's calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockTrace {
    pub block: usize,
    pub k_effective: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss over all segments after each epoch of the accepted run.
    pub epoch_losses: Vec<f64>,
    /// The first run ended above the initial loss and was repeated at half
    /// the learning rates.
    pub lr_halved: bool,
    /// Training did not improve on the initialization (or diverged); the
    /// block was frozen at its initial parameters.
    pub failed: bool,
    pub diagnostic: Option<String>,
    pub params: ParamSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub seed: u64,
    pub config: CalibConfig,
    pub blocks: Vec<BlockTrace>,
    /// Mean over blocks of final / initial loss.
    pub mean_loss_ratio: f64,
    pub mean_final_loss: f64,
    /// Wall-clock seconds. Not serialized, so reports stay reproducible.
    #[serde(skip)]
    pub elapsed_secs: f64,
}

/// The result of calibrating one block.
#[derive(Clone, Debug)]
pub struct CalibratedBlock {
    pub layer: LayerWeights,
    pub quant: LayerQuant,
    pub params: BlockParams,
    pub trace: BlockTrace,
}

/// Calibration data for one block.
pub struct BlockData<'a> {
    /// Inputs to the quantized branch, one per segment.
    pub inputs: &'a [Tensor],
    /// Full-precision outputs after `k_effective` blocks, one per segment.
    pub targets: &'a [Tensor],
}

/// Settings of the fake-quantized block for `model`'s configuration.
pub fn settings(model: &Model, cfg: &CalibConfig) -> QuantSettings {
    let mc = &model.config;
    QuantSettings {
        dims: BlockDims {
            act_bits: None,
            ..BlockDims::of(mc)
        },
        weight: Some(mc.weight_spec()),
        kv: if cfg.poq_during_training { None } else { mc.kv_spec() },
        post_rotary: mc.cache_post_rotary,
        smoothing: cfg.smoothing,
        surrogate: SurrogateGrad::Ste,
    }
}

fn check_fp(model: &Model) -> Result<()> {
    if model.quant.is_some() || model.config.quant_mode != QuantMode::Fp {
        return Err(Error::Contract("calibration needs a full-precision model".into()));
    }
    if model.layers.iter().any(|l| l.k_smooth.absorbed || l.v_smooth.absorbed) {
        return Err(Error::Contract("calibration needs a model without absorbed smoothing".into()));
    }
    Ok(())
}

/// Calibration segments: `n_segments` random windows of `seg_len` ids, each
/// starting with BOS.
pub fn calibration_segments(tokens: &[usize], cfg: &CalibConfig, max_seq_len: usize) -> Result<Vec<Vec<usize>>> {
    if cfg.seg_len > max_seq_len {
        return Err(Error::Capacity {
            requested: cfg.seg_len,
            max: max_seq_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    corpus::sample_segments(tokens, cfg.n_segments, cfg.seg_len - 1, &mut rng)
}

/// Inputs to every block of the full-precision model: `[layer][segment]`.
pub fn block_inputs(model: &Model, segments: &[Vec<usize>]) -> Result<Vec<Vec<Tensor>>> {
    let dims = model.dims();
    let mut out = vec![Vec::with_capacity(segments.len()); model.layers.len()];
    for seg in segments {
        let mut g = Graph::new();
        let mut x = model.embed_tokens(&mut g, seg)?;
        for (li, layer) in model.layers.iter().enumerate() {
            out[li].push(g.value(x).clone());
            x = FpBlock { layer, dims }.forward(&mut g, x)?;
        }
    }
    Ok(out)
}

/// Full-precision output of blocks `i..i + k` for each input.
pub fn block_targets(model: &Model, i: usize, k: usize, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let dims = model.dims();
    let stages: Vec<FpBlock> = model.layers[i..i + k]
        .iter()
        .map(|layer| FpBlock { layer, dims })
        .collect();
    let refs: Vec<&dyn Stage> = stages.iter().map(|s| s as &dyn Stage).collect();
    inputs
        .iter()
        .map(|x| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = chain(&mut g, xv, &refs)?;
            Ok(g.value(y).clone())
        })
        .collect()
}

/// Initial parameters for block `i`: smoothing from the statistics of its
/// K/V outputs on `inputs` (if enabled) and clipping at `clip_init`.
pub fn init_params(model: &Model, i: usize, inputs: &[Tensor], cfg: &CalibConfig) -> Result<BlockParams> {
    let layer = &model.layers[i];
    let mut p = BlockParams::identity(model.config.hidden_size);
    if cfg.smoothing {
        let dims = model.dims();
        let mut ks = Vec::with_capacity(inputs.len());
        let mut vs = Vec::with_capacity(inputs.len());
        for x in inputs {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let vars = layer.vars(&mut g, false);
            let pr = crate::model::block::project(&mut g, xv, &vars, &dims)?;
            ks.push(g.value(pr.k).clone());
            vs.push(g.value(pr.v).clone());
        }
        let k = SmoothingParams::from_statistics(&ks.iter().collect::<Vec<_>>())?;
        let v = SmoothingParams::from_statistics(&vs.iter().collect::<Vec<_>>())?;
        p = p.with_smoothing(&k, &v);
    }
    if cfg.learn_clipping {
        p = p.with_clipping(layer, &model.config.weight_spec(), cfg.clip_init);
    }
    Ok(p)
}

struct Trainer<'a> {
    model: &'a Model,
    i: usize,
    set: QuantSettings,
    cfg: &'a CalibConfig,
    data: BlockData<'a>,
}

impl Trainer<'_> {
    fn tail(&self, k: usize) -> Vec<FpBlock<'_>> {
        let dims = self.set.dims;
        self.model.layers[self.i + 1..self.i + k]
            .iter()
            .map(|layer| FpBlock { layer, dims })
            .collect()
    }

    /// Loss on segment `s`, with gradients for the learnable slots if asked.
    fn loss(&self, params: &BlockParams, s: usize, grads: bool) -> Result<(f64, Vec<Tensor>)> {
        let k = effective_k(self.cfg.k, self.i, self.model.layers.len())?;
        let tail = self.tail(k);
        let tail: Vec<&dyn Stage> = tail.iter().map(|t| t as &dyn Stage).collect();
        let mut g = Graph::new();
        let q = QuantBlock::register(&mut g, &self.model.layers[self.i], params, self.set, grads);
        let x = g.constant(self.data.inputs[s].clone());
        let target = g.constant(self.data.targets[s].clone());
        let l = crr_from_target(&mut g, x, &q, &tail, target, self.cfg.loss)?;
        let value = g.value(l).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "crr_loss" });
        }
        if !grads {
            return Ok((value, Vec::new()));
        }
        let leaves = q.leaves().to_vec();
        let mut gr = g.backward(l)?;
        let out = leaves
            .iter()
            .map(|&v| gr.take(v).expect("leaf gradient"))
            .collect();
        Ok((value, out))
    }

    fn mean_loss(&self, params: &BlockParams) -> Result<f64> {
        let n = self.data.inputs.len();
        let mut total = 0.0;
        for s in 0..n {
            total += self.loss(params, s, false)?.0;
        }
        Ok(total / n as f64)
    }

    /// One full training run from `init`; returns the parameters and the
    /// per-epoch losses.
    fn run(&self, init: &BlockParams, lr_scale: f32) -> Result<(BlockParams, Vec<f64>)> {
        let cfg = self.cfg;
        let mut params = init.clone();
        let n_smooth = if self.set.smoothing { 4 } else { 0 };
        let n_slots = params.slots_mut(self.set.smoothing).len();
        let mut opt = AdamW::new(
            AdamConfig {
                weight_decay: cfg.weight_decay,
                ..AdamConfig::default()
            },
            n_slots,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x5eed_0000 + self.i as u64));
        let mut order: Vec<usize> = (0..self.data.inputs.len()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let mut acc: Option<Vec<Tensor>> = None;
                for &s in batch {
                    let (_, gs) = self.loss(&params, s, true)?;
                    match &mut acc {
                        None => acc = Some(gs),
                        Some(a) => {
                            for (a, g) in a.iter_mut().zip(&gs) {
                                for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                                    *x += y;
                                }
                            }
                        }
                    }
                }
                let inv = 1.0 / batch.len() as f32;
                let acc = acc.expect("non-empty batch");
                opt.tick();
                for (slot, (p, g)) in params.slots_mut(self.set.smoothing).into_iter().zip(&acc).enumerate() {
                    let lr = if slot < n_smooth { cfg.lr_smoothing } else { cfg.lr_clipping };
                    let g = if batch.len() > 1 { g.map(|v| v * inv) } else { g.clone() };
                    opt.update(slot, p, &g, lr * lr_scale);
                }
            }
            epoch_losses.push(self.mean_loss(&params)?);
        }
        Ok((params, epoch_losses))
    }
}

/// Trains block `i`'s parameters from `init` under explicit quantizer
/// settings, without freezing.
pub fn train_block(
    model: &Model,
    i: usize,
    init: BlockParams,
    data: BlockData<'_>,
    cfg: &CalibConfig,
    set: QuantSettings,
) -> Result<(BlockParams, BlockTrace)> {
    cfg.validate(model.layers.len())?;
    if data.inputs.len() != data.targets.len() || data.inputs.is_empty() {
        return Err(Error::Contract("calibration needs matching, non-empty inputs and targets".into()));
    }
    let k_effective = effective_k(cfg.k, i, model.layers.len())?;
    let tr = Trainer {
        model,
        i,
        set,
        cfg,
        data,
    };
    let initial_loss = tr.mean_loss(&init)?;
    let mut trace = BlockTrace {
        block: i,
        k_effective,
        initial_loss,
        final_loss: initial_loss,
        epoch_losses: Vec::new(),
        lr_halved: false,
        failed: false,
        diagnostic: None,
        params: init.summary(),
    };
    let mut params = init.clone();
    match tr.run(&init, 1.0) {
        Ok(mut accepted) => {
            if accepted.1.last().is_some_and(|&l| l > initial_loss) {
                log::warn!("block {i}: loss rose above its initial value, retrying at half the learning rates");
                trace.lr_halved = true;
                match tr.run(&init, 0.5) {
                    Ok(r) => accepted = r,
                    Err(e) => trace.diagnostic = Some(e.to_string()),
                }
            }
            let (p, losses) = accepted;
            let last = losses.last().copied().unwrap_or(initial_loss);
            trace.epoch_losses = losses;
            if last > initial_loss || trace.diagnostic.is_some() {
                trace.failed = true;
                trace.diagnostic.get_or_insert_with(|| {
                    format!("final loss {last:e} exceeds initial loss {initial_loss:e}")
                });
            } else {
                params = p;
                trace.final_loss = last;
            }
        }
        Err(e @ Error::NonFinite { .. }) => {
            log::warn!("block {i}: {e}; keeping the initialization");
            trace.failed = true;
            trace.diagnostic = Some(e.to_string());
        }
        Err(e) => return Err(e),
    }
    trace.params = params.summary();
    Ok((params, trace))
}

/// Calibrates block `i` of the full-precision `model` from `init` and
/// freezes it: smoothing absorbed, weights replaced by their codes.
pub fn calibrate_block(
    model: &Model,
    i: usize,
    init: BlockParams,
    data: BlockData<'_>,
    cfg: &CalibConfig,
) -> Result<CalibratedBlock> {
    let set = settings(model, cfg);
    let (params, trace) = train_block(model, i, init, data, cfg, set)?;
    let (layer, quant) = freeze(&model.layers[i], &params, &set)?;
    Ok(CalibratedBlock {
        layer,
        quant,
        params,
        trace,
    })
}

/// Loss of block `i` on one segment for fixed parameters.
pub fn block_loss(
    model: &Model,
    i: usize,
    params: &BlockParams,
    input: &Tensor,
    target: &Tensor,
    cfg: &CalibConfig,
    set: QuantSettings,
) -> Result<f64> {
    let tr = Trainer {
        model,
        i,
        set,
        cfg,
        data: BlockData {
            inputs: std::slice::from_ref(input),
            targets: std::slice::from_ref(target),
        },
    };
    Ok(tr.loss(params, 0, false)?.0)
}

/// Result of [`smoothing_grad_check`].
#[derive(Clone, Debug)]
pub struct SmoothingGradCheck {
    pub check: GradCheck,
    /// Coordinates left out because a perturbation moved an integer code.
    pub skipped: usize,
}

/// Central-difference check of the loss gradient with respect to the K and
/// V smoothing scales of block `i`, on one segment, with frozen-code
/// surrogate gradients. A coordinate is only compared when neither
/// perturbation changes any weight or KV code, the extreme element of any
/// KV group, or the sign of any residual under the absolute error.
pub fn smoothing_grad_check(
    model: &Model,
    i: usize,
    params: &BlockParams,
    input: &Tensor,
    target: &Tensor,
    cfg: &CalibConfig,
    h: f32,
) -> Result<SmoothingGradCheck> {
    let set = QuantSettings {
        smoothing: true,
        surrogate: SurrogateGrad::FrozenCodes,
        ..settings(model, cfg)
    };
    let k = effective_k(cfg.k, i, model.layers.len())?;
    let dims = set.dims;
    let tail: Vec<FpBlock> = model.layers[i + 1..i + k]
        .iter()
        .map(|layer| FpBlock { layer, dims })
        .collect();
    let tail: Vec<&dyn Stage> = tail.iter().map(|t| t as &dyn Stage).collect();
    let eval = |p: &BlockParams, grads: bool| -> Result<(f64, Vec<i32>, Vec<Tensor>)> {
        let mut g = Graph::new();
        let q = QuantBlock::register(&mut g, &model.layers[i], p, set, grads);
        let x = g.constant(input.clone());
        let t = g.constant(target.clone());
        let y = q.forward(&mut g, x)?;
        let y = chain(&mut g, y, &tail)?;
        let l = cfg.loss.apply(&mut g, y, t)?;
        let value = g.value(l).item() as f64;
        let mut codes = q.codes(&g)?;
        // The absolute error is itself kinked where a residual changes sign.
        if cfg.loss == LossKind::Mae {
            let signs = g.value(y).data().iter().zip(target.data()).map(|(a, b)| (a - b).signum() as i32);
            codes.extend(signs);
        }
        let mut out = Vec::new();
        if grads {
            let leaves = q.leaves().to_vec();
            let mut gr = g.backward(l)?;
            // Slots 0 and 2 are the K and V scales.
            out.push(gr.take(leaves[0]).expect("leaf gradient"));
            out.push(gr.take(leaves[2]).expect("leaf gradient"));
        }
        Ok((value, codes, out))
    };
    let (_, base_codes, grads) = eval(params, true)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut skipped = 0;
    for (which, grad) in grads.iter().enumerate() {
        for c in 0..grad.numel() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            let (sp, sm) = if which == 0 {
                (&mut plus.k_s, &mut minus.k_s)
            } else {
                (&mut plus.v_s, &mut minus.v_s)
            };
            let s0 = sp.data()[c];
            if s0 - h < crate::quant::MIN_SCALE {
                skipped += 1;
                continue;
            }
            sp.data_mut()[c] = s0 + h;
            sm.data_mut()[c] = s0 - h;
            let step = (sp.data()[c] as f64) - (sm.data()[c] as f64);
            let (lp, cp, _) = eval(&plus, false)?;
            let (lm, cm, _) = eval(&minus, false)?;
            if cp != base_codes || cm != base_codes {
                skipped += 1;
                continue;
            }
            analytic.push(grad.data()[c] as f64);
            numeric.push((lp - lm) / step);
        }
    }
    Ok(SmoothingGradCheck {
        check: GradCheck { analytic, numeric },
        skipped,
    })
}

/// Absorbs the smoothing and materializes the weight codes.
pub fn freeze(layer: &LayerWeights, params: &BlockParams, set: &QuantSettings) -> Result<(LayerWeights, LayerQuant)> {
    let mut out = layer.clone();
    if set.smoothing {
        let (k, v) = params.smoothing();
        out.k_smooth = k;
        out.v_smooth = v;
    }
    let spec = set
        .weight
        .ok_or_else(|| Error::Contract("freezing needs a weight quantizer".into()))?;
    let clip = params.clip();
    let quant = quantize_layer(&mut out, &spec, clip.as_ref())?;
    Ok((out, quant))
}

/// Calibrates every block in order and returns the weight-KV model.
pub fn calibrate_model(model: &Model, tokens: &[usize], cfg: &CalibConfig) -> Result<(Model, CalibrationReport)> {
    let start = Instant::now();
    check_fp(model)?;
    cfg.validate(model.layers.len())?;
    let segments = calibration_segments(tokens, cfg, model.config.max_seq_len)?;
    let fp_inputs = block_inputs(model, &segments)?;
    let set = settings(model, cfg);
    let n = model.layers.len();
    let mut out = model.clone();
    out.config.quant_mode = QuantMode::WeightKv;
    let mut records = Vec::with_capacity(n);
    let mut blocks = Vec::with_capacity(n);
    let mut q_inputs: Option<Vec<Tensor>> = cfg.quantized_inputs.then(|| fp_inputs[0].clone());
    for i in 0..n {
        let k = effective_k(cfg.k, i, n)?;
        let targets = block_targets(model, i, k, &fp_inputs[i])?;
        let init = init_params(model, i, &fp_inputs[i], cfg)?;
        let inputs = q_inputs.as_deref().unwrap_or(&fp_inputs[i]);
        let cb = calibrate_block(
            model,
            i,
            init,
            BlockData {
                inputs,
                targets: &targets,
            },
            cfg,
        )?;
        log::info!(
            "block {i}: loss {:.5} -> {:.5}",
            cb.trace.initial_loss,
            cb.trace.final_loss
        );
        if let Some(qi) = &mut q_inputs {
            let frozen = FrozenBlock {
                layer: &cb.layer,
                dims: set.dims,
                kv: set.kv,
                post_rotary: set.post_rotary,
            };
            for x in qi.iter_mut() {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let y = frozen.forward(&mut g, xv)?;
                *x = g.value(y).clone();
            }
        }
        out.layers[i] = cb.layer;
        records.push(cb.quant);
        blocks.push(cb.trace);
    }
    out.quant = Some(records);
    let ratios: Vec<f64> = blocks
        .iter()
        .map(|b| if b.initial_loss > 0.0 { b.final_loss / b.initial_loss } else { 1.0 })
        .collect();
    let report = CalibrationReport {
        seed: cfg.seed,
        config: cfg.clone(),
        mean_loss_ratio: ratios.iter().sum::<f64>() / n as f64,
        mean_final_loss: blocks.iter().map(|b| b.final_loss).sum::<f64>() / n as f64,
        blocks,
        elapsed_secs: start.elapsed().as_secs_f64(),
    };
    Ok((out, report))
}
