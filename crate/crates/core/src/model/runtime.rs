//! Inference: prefill, cached decoding, and the cache-free reference path.

use crate::autodiff::{rope, Graph, RopeSpec, Var};
use crate::error::{Error, Result};
use crate::quant::SmoothingParams;
use crate::tensor::Tensor;

use super::block;
use super::cache::{CacheStats, KvStorage, PoqKvCache, TokenStore};
use super::{Model, QuantMode};

/// `y ⊙ s + δ` as graph ops; the identity is skipped.
pub(crate) fn to_raw_var(g: &mut Graph, y: Var, sp: &SmoothingParams) -> Result<Var> {
    if sp.is_identity() {
        return Ok(y);
    }
    let s = g.constant(Tensor::row_vector(sp.s.clone()));
    let d = g.constant(Tensor::row_vector(sp.delta.clone()));
    let y = g.mul(y, s)?;
    g.add(y, d)
}

/// Where the current step's keys/values end up relative to the cache.
struct KvPath<'a> {
    store: &'a mut TokenStore,
    smoothing: &'a SmoothingParams,
    poq: bool,
    /// Rotation applied before caching (keys under post-rotary caching).
    rotate: Option<RopeSpec>,
}

impl KvPath<'_> {
    /// Returns raw-space `[past + T, C]` rows for attention and appends the
    /// current rows to the cache.
    fn run(self, current: &Tensor, stats: &mut CacheStats) -> Result<Tensor> {
        let sp = self.smoothing;
        let mut raw = if sp.absorbed {
            sp.to_raw(current)?
        } else {
            current.clone()
        };
        if let Some(spec) = self.rotate {
            raw = rope(&raw, &spec, false)?;
        }
        let smoothed = if sp.absorbed && self.rotate.is_none() {
            current.clone()
        } else {
            sp.to_smoothed(&raw)?
        };
        let lossy = !matches!(self.store.storage(), KvStorage::F32);
        let mut read_raw = |store: &TokenStore| -> Result<Option<Tensor>> {
            match store.read() {
                Some(t) => {
                    stats.reads += 1;
                    stats.to_raw_calls += 1;
                    Ok(Some(sp.to_raw(&t)?))
                }
                None => Ok(None),
            }
        };
        if lossy && !self.poq {
            // Quantize the current rows first and attend to what was stored.
            self.store.append(&smoothed)?;
            return Ok(read_raw(self.store)?.expect("just appended"));
        }
        let past = read_raw(self.store)?;
        self.store.append(&smoothed)?;
        match past {
            Some(p) => Tensor::concat_rows(&[&p, &raw]),
            None => Ok(raw),
        }
    }
}

impl Model {
    /// Runs `ids` as new positions after everything already in `cache`.
    fn step(&self, ids: &[usize], cache: &mut PoqKvCache) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        cache.check_room(ids.len())?;
        let cfg = &self.config;
        let dims = self.dims();
        let past = cache.len();
        let post_rotary = cfg.cache_post_rotary;
        let mut g = Graph::new();
        let mut x = self.embed_tokens(&mut g, ids)?;
        for (li, layer) in self.layers.iter().enumerate() {
            let p = layer.vars(&mut g, false);
            let pr = block::project(&mut g, x, &p, &dims)?;
            let (k_cur, v_cur) = (g.value(pr.k).clone(), g.value(pr.v).clone());
            let lc = &mut cache.layers[li];
            let k_all = KvPath {
                store: &mut lc.k,
                smoothing: &layer.k_smooth,
                poq: cfg.poq,
                rotate: post_rotary.then(|| dims.rope(past)),
            }
            .run(&k_cur, &mut cache.stats)?;
            let v_all = KvPath {
                store: &mut lc.v,
                smoothing: &layer.v_smooth,
                poq: cfg.poq,
                rotate: None,
            }
            .run(&v_cur, &mut cache.stats)?;
            let k = g.constant(k_all);
            let v = g.constant(v_all);
            let a = block::attend(&mut g, pr.q, k, v, &dims, !post_rotary)?;
            x = block::finish(&mut g, x, a, &p, &dims)?;
        }
        cache.advance(ids.len());
        let logits = self.head(&mut g, x)?;
        Ok(g.value(logits).clone())
    }

    pub fn new_cache(&self) -> PoqKvCache {
        PoqKvCache::new(&self.config)
    }

    /// Processes the whole prompt. Attention sees the prompt's own K/V at
    /// full precision; they are stored into the returned cache afterwards.
    pub fn prefill(&self, ids: &[usize]) -> Result<(Tensor, PoqKvCache)> {
        let mut cache = self.new_cache();
        let logits = self.step(ids, &mut cache)?;
        Ok((logits, cache))
    }

    /// One generation step over a non-empty cache; returns `[1, vocab]`.
    pub fn decode_step(&self, id: usize, cache: &mut PoqKvCache) -> Result<Tensor> {
        if cache.is_empty() {
            return Err(Error::Contract("decode_step needs a prefilled cache".into()));
        }
        self.step(&[id], cache)
    }

    /// Full-sequence forward without a cache; keys and values stay at full
    /// precision. Applies activation quantization in `weight_activation`
    /// mode.
    pub fn forward_reference(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::Capacity {
                requested: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        let dims = self.dims();
        let mut g = Graph::new();
        let mut x = self.embed_tokens(&mut g, ids)?;
        for layer in &self.layers {
            let p = layer.vars(&mut g, false);
            let pr = block::project(&mut g, x, &p, &dims)?;
            let k = if layer.k_smooth.absorbed {
                to_raw_var(&mut g, pr.k, &layer.k_smooth)?
            } else {
                pr.k
            };
            let v = if layer.v_smooth.absorbed {
                to_raw_var(&mut g, pr.v, &layer.v_smooth)?
            } else {
                pr.v
            };
            let a = block::attend(&mut g, pr.q, k, v, &dims, true)?;
            x = block::finish(&mut g, x, a, &p, &dims)?;
        }
        let logits = self.head(&mut g, x)?;
        Ok(g.value(logits).clone())
    }

    /// Forward pass with every linear-layer input quantized per token.
    pub fn forward_activation_quant(&self, ids: &[usize]) -> Result<Tensor> {
        if self.config.quant_mode != QuantMode::WeightActivation {
            return Err(Error::Contract(format!(
                "forward_activation_quant needs weight_activation mode, model is {}",
                self.config.quant_mode.label()
            )));
        }
        self.forward_reference(ids)
    }

    /// Greedy continuation; returns prompt followed by `n_new` tokens.
    pub fn generate(&self, prompt: &[usize], n_new: usize) -> Result<Vec<usize>> {
        let mut out = prompt.to_vec();
        if n_new == 0 {
            return Ok(out);
        }
        if prompt.len() + n_new > self.config.max_seq_len {
            return Err(Error::Capacity {
                requested: prompt.len() + n_new,
                max: self.config.max_seq_len,
            });
        }
        let (logits, mut cache) = self.prefill(prompt)?;
        let mut next = argmax(logits.row(logits.rows() - 1));
        out.push(next);
        while out.len() < prompt.len() + n_new {
            let l = self.decode_step(next, &mut cache)?;
            next = argmax(l.row(0));
            out.push(next);
        }
        Ok(out)
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
