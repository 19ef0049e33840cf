//! Token-level ICL task: item-label pairs over a discrete vocabulary.
//!
//! Each sequence picks 2n distinct tokens, groups them into n item-label
//! pairs, appends one of the items as the query, and is placed at a random
//! offset inside the positional block. The target is the label that followed
//! the query item earlier in the sequence.

use rand::Rng;

use crate::error::{Error, Result};
use crate::seeding::stream_rng;

#[derive(Debug, Clone)]
pub struct TokenTaskBatch {
    pub vocab: usize,
    pub block: usize,
    pub n_pairs: usize,
    /// Token ids, each of length 2*n_pairs + 1.
    pub sequences: Vec<Vec<usize>>,
    /// Positional offset of each sequence inside the block.
    pub offsets: Vec<usize>,
    /// Target token id (the query's label).
    pub targets: Vec<usize>,
}

impl TokenTaskBatch {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        2 * self.n_pairs + 1
    }
}

pub fn gen_token_batch(
    vocab: usize,
    block: usize,
    n_pairs: usize,
    batch: usize,
    seed: u64,
) -> Result<TokenTaskBatch> {
    if n_pairs < 1 {
        return Err(Error::Invalid("n_pairs must be >= 1".into()));
    }
    if vocab < 2 * n_pairs {
        return Err(Error::Invalid(format!(
            "vocabulary of {vocab} cannot supply {} distinct tokens",
            2 * n_pairs
        )));
    }
    let seq_len = 2 * n_pairs + 1;
    if block < seq_len {
        return Err(Error::Invalid(format!(
            "block of {block} positions cannot hold sequences of length {seq_len}"
        )));
    }
    let mut sequences = Vec::with_capacity(batch);
    let mut offsets = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    for sample in 0..batch {
        let mut rng = stream_rng(seed, sample as u64);
        // Partial Fisher-Yates: the first 2n entries are distinct tokens.
        let mut pool: Vec<usize> = (0..vocab).collect();
        for i in 0..2 * n_pairs {
            let j = rng.gen_range(i..vocab);
            pool.swap(i, j);
        }
        let mut seq = Vec::with_capacity(seq_len);
        for p in 0..n_pairs {
            seq.push(pool[2 * p]);
            seq.push(pool[2 * p + 1]);
        }
        let q = rng.gen_range(0..n_pairs);
        seq.push(pool[2 * q]);
        let offset = rng.gen_range(0..=block - seq_len);
        sequences.push(seq);
        offsets.push(offset);
        targets.push(pool[2 * q + 1]);
    }
    Ok(TokenTaskBatch {
        vocab,
        block,
        n_pairs,
        sequences,
        offsets,
        targets,
    })
}
