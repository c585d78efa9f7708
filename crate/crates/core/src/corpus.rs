//! Byte-level tokenization, a deterministic synthetic text generator, and
//! the windowing used for fitting, calibration and evaluation.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const VOCAB_SIZE: usize = 258;

pub fn encode(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Drops the special tokens.
pub fn decode(ids: &[usize]) -> Vec<u8> {
    ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect()
}

const SUBJECTS: &[&str] = &[
    "the cache", "a token", "the model", "every layer", "the kernel", "a weight", "the scale",
    "our query", "the block", "this value",
];
const VERBS: &[&str] = &[
    "stores", "reads", "rounds", "shifts", "clips", "moves", "keeps", "drops", "scales", "packs",
];
const OBJECTS: &[&str] = &[
    "the keys", "four bits", "each group", "the past", "a channel", "the mean", "all rows",
    "the outliers", "its codes", "the bias",
];
const TAILS: &[&str] = &[
    "", " again", " twice", " in order", " per token", " at once", " for now", " with care",
];

/// Deterministic pseudo-English text of exactly `n_bytes` bytes: short
/// subject-verb-object sentences with a little numeric noise.
pub fn synthetic(seed: u64, n_bytes: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(n_bytes + 64);
    while out.len() < n_bytes {
        let s = SUBJECTS.choose(&mut rng).expect("non-empty");
        let v = VERBS.choose(&mut rng).expect("non-empty");
        let o = OBJECTS.choose(&mut rng).expect("non-empty");
        let t = TAILS.choose(&mut rng).expect("non-empty");
        out.push_str(s);
        out.push(' ');
        out.push_str(v);
        out.push(' ');
        out.push_str(o);
        out.push_str(t);
        if rng.random_bool(0.2) {
            out.push_str(&format!(" {}", rng.random_range(0..100)));
        }
        out.push_str(if rng.random_bool(0.15) { ".\n" } else { ". " });
    }
    out.truncate(n_bytes);
    out.into_bytes()
}

/// Non-overlapping windows of `len` tokens, each prefixed with [`BOS`], so
/// a window has `len + 1` ids and `len` scored next-token predictions. The
/// final short window is kept.
pub fn windows(tokens: &[usize], len: usize) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::Config("window length must be positive".into()));
    }
    if tokens.is_empty() {
        return Err(Error::Data("corpus is empty".into()));
    }
    Ok(tokens
        .chunks(len)
        .map(|c| std::iter::once(BOS).chain(c.iter().copied()).collect())
        .collect())
}

/// `n` random segments of `len` tokens (each prefixed with [`BOS`]).
pub fn sample_segments(
    tokens: &[usize],
    n: usize,
    len: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    if len == 0 || n == 0 {
        return Err(Error::Config("segment count and length must be positive".into()));
    }
    if tokens.len() < len {
        return Err(Error::Data(format!(
            "corpus of {} tokens is shorter than one {len}-token segment",
            tokens.len()
        )));
    }
    Ok((0..n)
        .map(|_| {
            let start = rng.random_range(0..=tokens.len() - len);
            std::iter::once(BOS)
                .chain(tokens[start..start + len].iter().copied())
                .collect()
        })
        .collect())
}
