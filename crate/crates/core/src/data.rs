//! Task data: the synthetic copy task and a byte-level character corpus.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{MgtError, Result};

/// Smallest corpus file accepted by [`load_char_corpus`].
pub const MIN_CORPUS_BYTES: usize = 10_000;

/// Seeds a ChaCha stream from a label and a list of integers.
pub fn stream_rng(label: &str, parts: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(label.as_bytes());
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&hasher.finalize());
    ChaCha8Rng::from_seed(seed)
}

/// `batch` packed token sequences with a per-token scoring mask.
///
/// `mask[p]` marks token `p` as a prediction target; it is predicted from the
/// logits at position `p − 1` of the same sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    /// Next-token targets and mask aligned with logits rows.
    pub fn shifted_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let n = self.tokens.len();
        let mut targets = vec![0; n];
        let mut mask = vec![false; n];
        for b in 0..self.batch {
            for t in 0..self.seq - 1 {
                let p = b * self.seq + t;
                targets[p] = self.tokens[p + 1];
                mask[p] = self.mask[p + 1];
            }
        }
        (targets, mask)
    }
}

/// Copy task: `m` random symbols, a separator, then the same `m` symbols.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CopyTask {
    pub vocab: usize,
    pub half_len: usize,
}

impl CopyTask {
    pub fn new(vocab: usize, half_len: usize, max_seq_len: usize) -> Result<Self> {
        if vocab < 3 {
            return Err(MgtError::InvalidConfig(format!(
                "copy task needs vocab >= 3, got {vocab}"
            )));
        }
        if half_len == 0 {
            return Err(MgtError::InvalidConfig("task.half_len must be >= 1".into()));
        }
        if 2 * half_len + 1 > max_seq_len {
            return Err(MgtError::InvalidConfig(format!(
                "copy sequence length {} exceeds model.seq_len {max_seq_len}",
                2 * half_len + 1
            )));
        }
        Ok(Self { vocab, half_len })
    }

    pub fn separator(&self) -> usize {
        self.vocab - 1
    }

    pub fn seq_len(&self) -> usize {
        2 * self.half_len + 1
    }

    pub fn batch_from_rng<R: Rng>(&self, batch: usize, rng: &mut R) -> Batch {
        let m = self.half_len;
        let seq = self.seq_len();
        let mut tokens = Vec::with_capacity(batch * seq);
        let mut mask = Vec::with_capacity(batch * seq);
        for _ in 0..batch {
            let symbols: Vec<usize> = (0..m)
                .map(|_| rng.random_range(0..self.vocab - 1))
                .collect();
            tokens.extend_from_slice(&symbols);
            tokens.push(self.separator());
            tokens.extend_from_slice(&symbols);
            mask.extend(std::iter::repeat_n(false, m + 1));
            mask.extend(std::iter::repeat_n(true, m));
        }
        Batch {
            tokens,
            mask,
            batch,
            seq,
        }
    }

    pub fn batch(&self, batch: usize, seed: u64) -> Batch {
        self.batch_from_rng(batch, &mut stream_rng("copy", &[seed]))
    }
}

/// Generates a copy-task batch deterministically from `seed`.
pub fn gen_copy_batch(vocab: usize, half_len: usize, batch: usize, seed: u64) -> Result<Batch> {
    let task = CopyTask::new(vocab, half_len, 2 * half_len + 1)?;
    Ok(task.batch(batch, seed))
}

/// Byte-level corpus with a 90/10 contiguous train/validation split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharCorpus {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// Byte for each id, sorted ascending. The id `vocab.len()` is "unknown".
    pub vocab: Vec<u8>,
}

impl CharCorpus {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 2 {
            return Err(MgtError::Ingestion("corpus is too small to split".into()));
        }
        let split = (bytes.len() * 9 / 10).max(1);
        let (train_bytes, val_bytes) = bytes.split_at(split);
        let mut present = [false; 256];
        for &b in train_bytes {
            present[b as usize] = true;
        }
        let vocab: Vec<u8> = (0..=255u8).filter(|&b| present[b as usize]).collect();
        let mut lookup = [usize::MAX; 256];
        for (id, &b) in vocab.iter().enumerate() {
            lookup[b as usize] = id;
        }
        let unknown = vocab.len();
        let encode = |s: &[u8]| -> Vec<usize> {
            s.iter()
                .map(|&b| match lookup[b as usize] {
                    usize::MAX => unknown,
                    id => id,
                })
                .collect()
        };
        Ok(Self {
            train: encode(train_bytes),
            val: encode(val_bytes),
            vocab,
        })
    }

    /// Model vocabulary size, including the unknown id.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len() + 1
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .map(|&id| self.vocab.get(id).copied().unwrap_or(b'?'))
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn window_batch(ids: &[usize], starts: &[usize], seq: usize) -> Batch {
        let mut tokens = Vec::with_capacity(starts.len() * seq);
        for &s in starts {
            tokens.extend_from_slice(&ids[s..s + seq]);
        }
        Batch {
            mask: vec![true; tokens.len()],
            tokens,
            batch: starts.len(),
            seq,
        }
    }

    /// Random training windows.
    pub fn train_batch<R: Rng>(&self, batch: usize, seq: usize, rng: &mut R) -> Result<Batch> {
        if self.train.len() < seq {
            return Err(MgtError::InvalidConfig(format!(
                "training split ({} ids) shorter than sequence length {seq}",
                self.train.len()
            )));
        }
        let starts: Vec<usize> = (0..batch)
            .map(|_| rng.random_range(0..=self.train.len() - seq))
            .collect();
        Ok(Self::window_batch(&self.train, &starts, seq))
    }

    /// Evenly strided validation windows; deterministic.
    pub fn val_batch(&self, index: usize, batch: usize, seq: usize) -> Result<Batch> {
        if self.val.len() < seq {
            return Err(MgtError::InvalidConfig(format!(
                "validation split ({} ids) shorter than sequence length {seq}",
                self.val.len()
            )));
        }
        let slots = self.val.len() - seq + 1;
        let starts: Vec<usize> = (0..batch)
            .map(|i| ((index * batch + i) * seq) % slots)
            .collect();
        Ok(Self::window_batch(&self.val, &starts, seq))
    }
}

pub fn load_char_corpus(path: &Path) -> Result<CharCorpus> {
    let bytes = std::fs::read(path)
        .map_err(|e| MgtError::Ingestion(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < MIN_CORPUS_BYTES {
        return Err(MgtError::Ingestion(format!(
            "{} has {} bytes; at least {MIN_CORPUS_BYTES} are required",
            path.display(),
            bytes.len()
        )));
    }
    if std::str::from_utf8(&bytes).is_err() {
        return Err(MgtError::Ingestion(format!(
            "{} is not UTF-8",
            path.display()
        )));
    }
    CharCorpus::from_bytes(&bytes)
}
