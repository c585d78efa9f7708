//! The `KVQ1` model container.
//!
//! Layout:
//!
//! ```text
//! 0       "KVQ1"
//! 4       header length in bytes, u64 little-endian
//! 12      JSON header
//! P       payload, P = 12 + header length rounded up to 64
//! ```
//!
//! The header holds the model configuration, per-layer metadata (smoothing
//! state, weight-quantization specs) and a table of every tensor's name,
//! dtype, shape, and byte offset relative to `P`. Offsets are multiples of
//! 64, and all values are little-endian. Full-precision and quantized
//! models share the format; `config.quant_mode` tells them apart.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClipParams, LayerQuant, LayerWeights, Model, ModelConfig, LINEARS};
use crate::quant::{SmoothingParams, WeightQuantSpec, WeightQuantized};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"KVQ1";
pub const ALIGN: u64 = 64;
const PREFIX: u64 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
    I32,
}

impl Dtype {
    pub fn size(&self) -> u64 {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 | Dtype::I32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearMeta {
    pub spec: WeightQuantSpec,
    pub clipped: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub k_absorbed: bool,
    pub v_absorbed: bool,
    /// Present when the block's weights are stored as integer codes too.
    pub quant: Option<BTreeMap<String, LinearMeta>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub layers: Vec<LayerMeta>,
    pub tensors: Vec<TensorEntry>,
}

fn align(x: u64) -> u64 {
    x.div_ceil(ALIGN) * ALIGN
}

#[derive(Default)]
struct Writer {
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: String, dtype: Dtype, shape: Vec<usize>, bytes: Vec<u8>) {
        let offset = align(self.payload.len() as u64);
        self.payload.resize(offset as usize, 0);
        self.entries.push(TensorEntry {
            name,
            dtype,
            shape,
            offset,
            nbytes: bytes.len() as u64,
        });
        self.payload.extend(bytes);
    }

    fn f32s(&mut self, name: String, shape: Vec<usize>, v: &[f32]) {
        self.push(name, Dtype::F32, shape, v.iter().flat_map(|x| x.to_le_bytes()).collect());
    }

    fn tensor(&mut self, name: String, t: &Tensor) {
        self.f32s(name, t.shape().to_vec(), t.data());
    }
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.tensor("embed".into(), &model.embed);
    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        for (name, t) in layer.named() {
            w.tensor(format!("layers.{i}.{name}"), t);
        }
        for (which, sp) in [("k_smooth", &layer.k_smooth), ("v_smooth", &layer.v_smooth)] {
            w.f32s(format!("layers.{i}.{which}.s"), vec![1, sp.s.len()], &sp.s);
            w.f32s(format!("layers.{i}.{which}.delta"), vec![1, sp.delta.len()], &sp.delta);
        }
        let quant = match &model.quant {
            Some(q) => {
                let lq = q
                    .get(i)
                    .ok_or_else(|| Error::Contract(format!("no quantization record for layer {i}")))?;
                let mut meta = BTreeMap::new();
                for (name, wq) in &lq.codes {
                    let p = format!("layers.{i}.{name}");
                    let g = wq.groups();
                    w.push(format!("{p}.codes"), Dtype::U8, vec![wq.rows, wq.cols], wq.codes.clone());
                    w.f32s(format!("{p}.h"), vec![g, wq.cols], &wq.h);
                    w.push(
                        format!("{p}.z"),
                        Dtype::I32,
                        vec![g, wq.cols],
                        wq.z.iter().flat_map(|x| x.to_le_bytes()).collect(),
                    );
                    let clip = lq.clip.get(name);
                    if let Some(c) = clip {
                        w.tensor(format!("{p}.gamma"), &c.gamma);
                        w.tensor(format!("{p}.beta"), &c.beta);
                    }
                    meta.insert(
                        name.clone(),
                        LinearMeta {
                            spec: wq.spec,
                            clipped: clip.is_some(),
                        },
                    );
                }
                Some(meta)
            }
            None => None,
        };
        layers.push(LayerMeta {
            k_absorbed: layer.k_smooth.absorbed,
            v_absorbed: layer.v_smooth.absorbed,
            quant,
        });
    }
    w.tensor("final_norm".into(), &model.final_norm);
    w.tensor("lm_head".into(), &model.lm_head);
    let header = Header {
        config: model.config.clone(),
        layers,
        tensors: w.entries,
    };
    let json = serde_json::to_vec(&header)?;
    let start = align(PREFIX + json.len() as u64);
    let mut out = Vec::with_capacity(start as usize + w.payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(start as usize, 0);
    out.extend(w.payload);
    Ok(out)
}

/// Parses and validates the header: magic, lengths, and that every tensor
/// lies inside the file, is aligned, and overlaps no other. Returns the
/// header and the payload start.
pub fn read_header(bytes: &[u8]) -> Result<(Header, u64)> {
    let len = bytes.len() as u64;
    if len < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic: not a KVQ1 checkpoint"));
    }
    if len < PREFIX {
        return Err(Error::format(len, "truncated: file ends inside the header length field"));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    if hlen > len - PREFIX {
        return Err(Error::format(
            len,
            format!("truncated: header of {hlen} bytes extends past the end of the file"),
        ));
    }
    let json = &bytes[PREFIX as usize..(PREFIX + hlen) as usize];
    let header: Header = serde_json::from_slice(json).map_err(|e| {
        let pos = json
            .split_inclusive(|&b| b == b'\n')
            .take(e.line().saturating_sub(1))
            .map(|l| l.len())
            .sum::<usize>()
            + e.column().saturating_sub(1);
        Error::format(PREFIX + pos as u64, format!("malformed header: {e}"))
    })?;
    let start = align(PREFIX + hlen);
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let numel: usize = t.shape.iter().product();
        if t.nbytes != numel as u64 * t.dtype.size() {
            return Err(Error::format(
                PREFIX,
                format!("tensor {} declares {} bytes for shape {:?}", t.name, t.nbytes, t.shape),
            ));
        }
        if t.offset % ALIGN != 0 {
            return Err(Error::format(
                start + t.offset,
                format!("tensor {} is not {ALIGN}-byte aligned", t.name),
            ));
        }
        let end = start
            .checked_add(t.offset)
            .and_then(|s| s.checked_add(t.nbytes))
            .unwrap_or(u64::MAX);
        if end > len {
            return Err(Error::format(
                len,
                format!("truncated payload: tensor {} needs bytes up to {end}", t.name),
            ));
        }
        spans.push((t.offset, t.offset + t.nbytes, &t.name));
    }
    spans.sort();
    for pair in spans.windows(2) {
        let ((_, a_end, a), (b_start, _, b)) = (pair[0], pair[1]);
        if b_start < a_end {
            return Err(Error::format(
                start + b_start,
                format!("overlapping tensors: {b} starts inside {a}"),
            ));
        }
    }
    Ok((header, start))
}

struct Reader<'a> {
    bytes: &'a [u8],
    start: u64,
    table: BTreeMap<&'a str, &'a TensorEntry>,
}

impl<'a> Reader<'a> {
    fn entry(&self, name: &str, dtype: Dtype) -> Result<(&'a TensorEntry, &'a [u8])> {
        let e = *self
            .table
            .get(name)
            .ok_or_else(|| Error::format(PREFIX, format!("missing tensor {name}")))?;
        if e.dtype != dtype {
            return Err(Error::format(PREFIX, format!("tensor {name} has dtype {:?}, expected {dtype:?}", e.dtype)));
        }
        let s = (self.start + e.offset) as usize;
        Ok((e, &self.bytes[s..s + e.nbytes as usize]))
    }

    fn f32s(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let (e, b) = self.entry(name, Dtype::F32)?;
        let v = b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((e.shape.clone(), v))
    }

    fn tensor(&self, name: &str) -> Result<Tensor> {
        let (shape, v) = self.f32s(name)?;
        Tensor::new(shape, v).map_err(|e| Error::format(PREFIX, format!("tensor {name}: {e}")))
    }

    fn arc(&self, name: &str) -> Result<Arc<Tensor>> {
        self.tensor(name).map(Arc::new)
    }

    fn smoothing(&self, prefix: &str, absorbed: bool) -> Result<SmoothingParams> {
        Ok(SmoothingParams {
            s: self.f32s(&format!("{prefix}.s"))?.1,
            delta: self.f32s(&format!("{prefix}.delta"))?.1,
            absorbed,
        })
    }

    fn weight_codes(&self, p: &str, spec: WeightQuantSpec) -> Result<WeightQuantized> {
        let (e, codes) = self.entry(&format!("{p}.codes"), Dtype::U8)?;
        let (rows, cols) = match e.shape[..] {
            [r, c] => (r, c),
            _ => return Err(Error::format(PREFIX, format!("{p}.codes must be 2-D"))),
        };
        let h = self.f32s(&format!("{p}.h"))?.1;
        let z: Vec<i32> = self
            .entry(&format!("{p}.z"), Dtype::I32)?
            .1
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let groups = spec.groups(rows) * cols;
        if h.len() != groups || z.len() != groups {
            return Err(Error::format(PREFIX, format!("{p}: group parameters do not match the codes")));
        }
        Ok(WeightQuantized {
            rows,
            cols,
            spec,
            codes: codes.to_vec(),
            h,
            z,
        })
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let (header, start) = read_header(bytes)?;
    let r = Reader {
        bytes,
        start,
        table: header.tensors.iter().map(|t| (t.name.as_str(), t)).collect(),
    };
    let cfg = header.config.clone();
    cfg.validate()?;
    if header.layers.len() != cfg.n_layers {
        return Err(Error::format(
            PREFIX,
            format!("header lists {} layers, config has {}", header.layers.len(), cfg.n_layers),
        ));
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut quant = Vec::new();
    for (i, meta) in header.layers.iter().enumerate() {
        let p = format!("layers.{i}");
        let t = |n: &str| r.arc(&format!("{p}.{n}"));
        layers.push(LayerWeights {
            attn_norm: t("attn_norm")?,
            wq: t("wq")?,
            wk: t("wk")?,
            bk: t("bk")?,
            wv: t("wv")?,
            bv: t("bv")?,
            wo: t("wo")?,
            mlp_norm: t("mlp_norm")?,
            w_gate: t("w_gate")?,
            w_up: t("w_up")?,
            w_down: t("w_down")?,
            k_smooth: r.smoothing(&format!("{p}.k_smooth"), meta.k_absorbed)?,
            v_smooth: r.smoothing(&format!("{p}.v_smooth"), meta.v_absorbed)?,
        });
        if let Some(q) = &meta.quant {
            let mut lq = LayerQuant::default();
            for (name, lm) in q {
                if !LINEARS.contains(&name.as_str()) {
                    return Err(Error::format(PREFIX, format!("unknown projection {name} in layer {i}")));
                }
                let lp = format!("{p}.{name}");
                lq.codes.insert(name.clone(), r.weight_codes(&lp, lm.spec)?);
                if lm.clipped {
                    lq.clip.insert(
                        name.clone(),
                        ClipParams {
                            gamma: r.tensor(&format!("{lp}.gamma"))?,
                            beta: r.tensor(&format!("{lp}.beta"))?,
                        },
                    );
                }
            }
            quant.push(lq);
        }
    }
    let quant = match quant.len() {
        0 => None,
        n if n == cfg.n_layers => Some(quant),
        _ => return Err(Error::format(PREFIX, "quantization records present for only some layers")),
    };
    Ok(Model {
        embed: r.arc("embed")?,
        layers,
        final_norm: r.arc("final_norm")?,
        lm_head: r.arc("lm_head")?,
        quant,
        config: cfg,
    })
}

pub fn save(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}
