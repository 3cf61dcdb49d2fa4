//! Bundled synthetic corpus and the byte tokenizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const CORPUS_VOCAB: usize = 256;
/// Successors per symbol in the transition table.
const FANOUT: usize = 4;
/// Successor weights are `u^SKEW` for uniform `u`, so most symbols have a clear favourite.
const SKEW: f64 = 5.0;
/// Sequence indices at or above this are reserved for evaluation.
pub const EVAL_BASE: u64 = 1 << 40;

/// First-order Markov text over 256 symbols with a sparse, seeded transition
/// table. Sequence `i` is a pure function of `(seed, i)`, so any batch can be
/// regenerated from the step counter alone.
#[derive(Debug, Clone)]
pub struct MarkovCorpus {
    seed: u64,
    successors: Vec<[(u8, f64); FANOUT]>,
}

impl MarkovCorpus {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let successors = (0..CORPUS_VOCAB)
            .map(|_| {
                let mut row = [(0u8, 0.0f64); FANOUT];
                let mut total = 0.0;
                for slot in row.iter_mut() {
                    let w: f64 = rng.random_range(0.05f64..1.0).powf(SKEW);
                    *slot = (rng.random_range(0..CORPUS_VOCAB) as u8, w);
                    total += w;
                }
                let mut acc = 0.0;
                for slot in row.iter_mut() {
                    acc += slot.1 / total;
                    slot.1 = acc;
                }
                row[FANOUT - 1].1 = 1.0;
                row
            })
            .collect();
        Self { seed, successors }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sequence(&self, index: u64, len: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let mut cur = rng.random_range(0..CORPUS_VOCAB);
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(cur);
            let u: f64 = rng.random();
            let row = &self.successors[cur];
            cur = row.iter().find(|(_, c)| u < *c).unwrap_or(&row[FANOUT - 1]).0 as usize;
        }
        out
    }

    /// Training batch for `step`; `stream` separates the streams of different runs.
    pub fn batch(&self, stream: u64, step: usize, batch_size: usize, len: usize) -> Vec<Vec<usize>> {
        let base = stream * (EVAL_BASE >> 8) + (step * batch_size) as u64;
        (0..batch_size as u64)
            .map(|b| self.sequence(base + b, len))
            .collect()
    }

    /// Held-out sequences, disjoint from every training batch.
    pub fn eval_batch(&self, count: usize, len: usize) -> Vec<Vec<usize>> {
        (0..count as u64)
            .map(|i| self.sequence(EVAL_BASE + i, len))
            .collect()
    }

    /// Probability of `next` following `cur`.
    pub fn transition(&self, cur: usize, next: usize) -> f64 {
        let row = &self.successors[cur];
        let mut prev = 0.0;
        let mut p = 0.0;
        for &(s, c) in row {
            if s as usize == next {
                p += c - prev;
            }
            prev = c;
        }
        p
    }
}

/// Bytes plus BOS and EOS.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const BOS: usize = 256;
    pub const EOS: usize = 257;
    pub const VOCAB: usize = 258;

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.bytes().map(usize::from).collect()
    }

    /// Bytes are decoded lossily; BOS and EOS are dropped.
    pub fn decode(&self, tokens: &[usize]) -> Result<String> {
        let mut bytes = Vec::with_capacity(tokens.len());
        for &t in tokens {
            match t {
                0..=255 => bytes.push(t as u8),
                Self::BOS | Self::EOS => {}
                _ => return Err(Error::Input(format!("token {t} is not a byte token"))),
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}
