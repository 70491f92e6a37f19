use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, TokenizedCorpus};
use crate::seed::mix;

/// `batch_size` token sequences of equal length, row-major.
///
/// Row `b` predicts `targets(b)` from `inputs(b)`: the targets are the same
/// sample shifted left by one token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    batch_size: usize,
    seq_len: usize,
    tokens: Vec<u32>,
}

impl TokenBatch {
    pub fn from_rows(rows: &[Vec<u32>]) -> Self {
        let seq_len = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == seq_len), "ragged token batch");
        Self { batch_size: rows.len(), seq_len, tokens: rows.concat() }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Tokens per row, including the final target-only token.
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.tokens[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn inputs(&self, b: usize) -> &[u32] {
        let r = self.row(b);
        &r[..r.len() - 1]
    }

    pub fn targets(&self, b: usize) -> &[u32] {
        &self.row(b)[1..]
    }

    /// Splits into consecutive micro-batches of at most `size` rows.
    pub fn micro_batches(&self, size: usize) -> Vec<TokenBatch> {
        let size = size.max(1);
        self.tokens
            .chunks(size * self.seq_len)
            .map(|chunk| TokenBatch {
                batch_size: chunk.len() / self.seq_len,
                seq_len: self.seq_len,
                tokens: chunk.to_vec(),
            })
            .collect()
    }
}

/// Endless, wrapping stream of batches over a fixed set of samples.
///
/// The sample at stream position `p` is `perm_e[p mod n]`, where `perm_e` is
/// a permutation of the shard seeded by `(seed, e)` and `e = p / n`. A batch
/// therefore depends only on `(seed, cursor)`.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    corpus: Arc<TokenizedCorpus>,
    indices: Vec<usize>,
    batch_size: usize,
    seed: u64,
    cursor: u64,
    epoch: Option<(u64, Vec<usize>)>,
}

impl BatchIterator {
    pub fn new(
        corpus: Arc<TokenizedCorpus>,
        indices: Vec<usize>,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self, DataError> {
        if indices.is_empty() {
            return Err(DataError::EmptyShard);
        }
        if batch_size == 0 {
            return Err(DataError::ZeroBatch);
        }
        Ok(Self { corpus, indices, batch_size, seed, cursor: 0, epoch: None })
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    /// Number of distinct samples in the stream.
    pub fn shard_len(&self) -> usize {
        self.indices.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Moves to an absolute stream position, counted in samples.
    pub fn seek(&mut self, cursor: u64) {
        self.cursor = cursor;
    }

    /// Positions the stream at the start of batch number `step`.
    pub fn seek_to_step(&mut self, step: u64) {
        self.cursor = step * self.batch_size as u64;
    }

    pub fn next_batch(&mut self) -> TokenBatch {
        let n = self.indices.len() as u64;
        let t = self.corpus.seq_len();
        let mut tokens = Vec::with_capacity(self.batch_size * t);
        for _ in 0..self.batch_size {
            let epoch = self.cursor / n;
            let slot = (self.cursor % n) as usize;
            let sample = self.permutation(epoch)[slot];
            tokens.extend_from_slice(self.corpus.sample(sample));
            self.cursor += 1;
        }
        TokenBatch { batch_size: self.batch_size, seq_len: t, tokens }
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm = self.indices.clone();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.seed, epoch)));
            self.epoch = Some((epoch, perm));
        }
        &self.epoch.as_ref().unwrap().1
    }
}
