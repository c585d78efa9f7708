//! The KV cache for past-only quantization.
//!
//! Each layer stores keys and values as packed integer codes with one
//! half-precision `(m, n)` pair per `(token, group)`, or as plain 16/32-bit
//! floats in the lossless modes. Rows are appended once and never rewritten;
//! per-position write counters make that checkable.

use half::f16;

use crate::error::{Error, Result};
use crate::quant::{quantize_token, TokenQuantSpec};
use crate::tensor::Tensor;

use super::config::ModelConfig;

/// How cached rows are stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KvStorage {
    Quantized(TokenQuantSpec),
    F16,
    F32,
}

impl KvStorage {
    pub fn of(cfg: &ModelConfig) -> Self {
        if !cfg.quantizes_kv() {
            return KvStorage::F32;
        }
        match cfg.kv_spec() {
            Some(spec) => KvStorage::Quantized(spec),
            None if cfg.kv_bits == 16 => KvStorage::F16,
            None => KvStorage::F32,
        }
    }

    pub fn bits(&self) -> u32 {
        match self {
            KvStorage::Quantized(s) => s.bits,
            KvStorage::F16 => 16,
            KvStorage::F32 => 32,
        }
    }

    /// Bytes one cached row of `cols` channels occupies, codes plus group
    /// parameters.
    pub fn row_bytes(&self, cols: usize) -> usize {
        match self {
            KvStorage::Quantized(s) => {
                (cols * s.bits as usize).div_ceil(8) + s.groups_per_row(cols) * 2 * 2
            }
            KvStorage::F16 => cols * 2,
            KvStorage::F32 => cols * 4,
        }
    }
}

/// Append-only store of `[rows, cols]` activations.
#[derive(Clone, Debug)]
pub struct TokenStore {
    cols: usize,
    storage: KvStorage,
    rows: usize,
    /// Packed codes (little-endian bit order within each row) or raw floats.
    payload: Vec<u8>,
    /// Interleaved `(m, n)` per `(row, group)` for quantized storage.
    params: Vec<f16>,
    writes: Vec<u32>,
}

impl TokenStore {
    pub fn new(cols: usize, storage: KvStorage) -> Self {
        TokenStore {
            cols,
            storage,
            rows: 0,
            payload: Vec::new(),
            params: Vec::new(),
            writes: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn storage(&self) -> KvStorage {
        self.storage
    }

    /// Bytes held by the codes/values and group parameters.
    pub fn bytes(&self) -> usize {
        self.payload.len() + self.params.len() * 2
    }

    pub fn write_counts(&self) -> &[u32] {
        &self.writes
    }

    /// Quantizes (or converts) `rows` and appends them.
    pub fn append(&mut self, rows: &Tensor) -> Result<()> {
        if rows.cols() != self.cols {
            return Err(Error::shape("cache append", &[1, self.cols], rows.shape()));
        }
        match self.storage {
            KvStorage::Quantized(spec) => {
                let q = quantize_token(rows, &spec)?;
                let bits = spec.bits as usize;
                let row_len = (self.cols * bits).div_ceil(8);
                let mask = (1u32 << bits) - 1;
                for r in 0..q.rows {
                    let start = self.payload.len();
                    self.payload.resize(start + row_len, 0);
                    let dst = &mut self.payload[start..];
                    for (c, &code) in q.codes[r * q.cols..(r + 1) * q.cols].iter().enumerate() {
                        let u = (code as i32 as u32) & mask;
                        let bit = c * bits;
                        // A field of at most 8 bits spans at most two bytes.
                        let word = u << (bit % 8);
                        dst[bit / 8] |= word as u8;
                        if bit % 8 + bits > 8 {
                            dst[bit / 8 + 1] |= (word >> 8) as u8;
                        }
                    }
                }
                for (m, n) in q.m.iter().zip(&q.n) {
                    self.params.push(f16::from_f32(*m));
                    self.params.push(f16::from_f32(*n));
                }
            }
            KvStorage::F16 => {
                for &v in rows.data() {
                    self.payload.extend_from_slice(&f16::from_f32(v).to_le_bytes());
                }
            }
            KvStorage::F32 => {
                for &v in rows.data() {
                    self.payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        self.rows += rows.rows();
        self.writes.extend(std::iter::repeat_n(1, rows.rows()));
        Ok(())
    }

    /// Dequantized contents, `[rows, cols]`; `None` when empty.
    pub fn read(&self) -> Option<Tensor> {
        if self.rows == 0 {
            return None;
        }
        let cols = self.cols;
        let mut out = Vec::with_capacity(self.rows * cols);
        match self.storage {
            KvStorage::Quantized(spec) => {
                let bits = spec.bits as usize;
                let row_len = (cols * bits).div_ceil(8);
                let gpr = spec.groups_per_row(cols);
                let sign_bit = 1i32 << (bits - 1);
                let mask = (1u32 << bits) - 1;
                for r in 0..self.rows {
                    let src = &self.payload[r * row_len..(r + 1) * row_len];
                    for c in 0..cols {
                        let bit = c * bits;
                        let mut word = src[bit / 8] as u32;
                        if bit / 8 + 1 < src.len() {
                            word |= (src[bit / 8 + 1] as u32) << 8;
                        }
                        let u = ((word >> (bit % 8)) & mask) as i32;
                        let code = (u ^ sign_bit) - sign_bit;
                        let gi = r * gpr + c / spec.group_size;
                        let m = self.params[2 * gi].to_f32();
                        let n = self.params[2 * gi + 1].to_f32();
                        out.push(code as f32 * n + m);
                    }
                }
            }
            KvStorage::F16 => {
                for ch in self.payload.chunks_exact(2) {
                    out.push(f16::from_le_bytes([ch[0], ch[1]]).to_f32());
                }
            }
            KvStorage::F32 => {
                for ch in self.payload.chunks_exact(4) {
                    out.push(f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]));
                }
            }
        }
        Some(Tensor::from_vec(self.rows, cols, out))
    }
}

#[derive(Clone, Debug)]
pub struct LayerCache {
    pub k: TokenStore,
    pub v: TokenStore,
}

/// Instrumentation counters.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    /// Reads of a non-empty past (keys and values count separately).
    pub reads: u64,
    /// Smoothed-to-raw conversions applied to dequantized past rows.
    pub to_raw_calls: u64,
}

/// Per-stream cache over all layers.
#[derive(Clone, Debug)]
pub struct PoqKvCache {
    pub layers: Vec<LayerCache>,
    len: usize,
    max_len: usize,
    storage: KvStorage,
    pub stats: CacheStats,
}

impl PoqKvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        let storage = KvStorage::of(cfg);
        PoqKvCache {
            layers: (0..cfg.n_layers)
                .map(|_| LayerCache {
                    k: TokenStore::new(cfg.hidden_size, storage),
                    v: TokenStore::new(cfg.hidden_size, storage),
                })
                .collect(),
            len: 0,
            max_len: cfg.max_seq_len,
            storage,
            stats: CacheStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn storage(&self) -> KvStorage {
        self.storage
    }

    /// Bytes actually held by all code/value and parameter buffers.
    pub fn bytes(&self) -> usize {
        self.layers.iter().map(|l| l.k.bytes() + l.v.bytes()).sum()
    }

    pub fn check_room(&self, extra: usize) -> Result<()> {
        if self.len + extra > self.max_len {
            return Err(Error::Capacity {
                requested: self.len + extra,
                max: self.max_len,
            });
        }
        Ok(())
    }

    /// Records that `n` tokens were appended to every layer.
    pub(crate) fn advance(&mut self, n: usize) {
        self.len += n;
        debug_assert!(self
            .layers
            .iter()
            .all(|l| l.k.rows() == self.len && l.v.rows() == self.len));
    }

    /// Largest number of times any cached position was written.
    pub fn max_write_count(&self) -> u32 {
        self.layers
            .iter()
            .flat_map(|l| l.k.write_counts().iter().chain(l.v.write_counts()))
            .copied()
            .max()
            .unwrap_or(0)
    }
}
