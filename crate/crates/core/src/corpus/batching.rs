use rand::seq::SliceRandom;
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use super::vocab::{TokenSequence, MASK, NUM_RESERVED, PAD};
use super::CorpusError;
use crate::losses::length_ratio;
use crate::rng::{self, Stream};

/// Sort by length, cut into contiguous chunks of `batch_size`, then shuffle the
/// chunk order. Returns indices into `lengths`.
pub fn group_by_length<R: Rng + ?Sized>(
    lengths: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.shuffle(rng);
    chunks
}

/// Uniformly shuffled batching, the baseline that length grouping is measured against.
pub fn shuffled_batches<R: Rng + ?Sized>(
    n: usize,
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Pad tokens needed to right-pad every chunk to its longest member.
pub fn padding_tokens(chunks: &[Vec<usize>], lengths: &[usize]) -> usize {
    chunks
        .iter()
        .map(|c| {
            let max = c.iter().map(|&i| lengths[i]).max().unwrap_or(0);
            c.iter().map(|&i| max - lengths[i]).sum::<usize>()
        })
        .sum()
}

/// Endless epoch-by-epoch batch order over a fixed dataset.
///
/// Epoch `e` uses shuffle stream `e` of the run seed, so the order of any epoch
/// can be reproduced without replaying the earlier ones.
#[derive(Debug, Clone)]
pub struct EpochBatcher {
    lengths: Vec<usize>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    chunks: Vec<Vec<usize>>,
    cursor: usize,
}

impl EpochBatcher {
    pub fn new(lengths: Vec<usize>, batch_size: usize, seed: u64) -> Self {
        assert!(!lengths.is_empty(), "cannot batch an empty dataset");
        let mut b = Self {
            lengths,
            batch_size,
            seed,
            epoch: 0,
            chunks: Vec::new(),
            cursor: 0,
        };
        b.start_epoch();
        b
    }

    fn start_epoch(&mut self) {
        let mut rng = rng::stream(self.seed, Stream::Shuffle, self.epoch);
        self.chunks = group_by_length(&self.lengths, self.batch_size, &mut rng);
        self.cursor = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Next chunk of dataset indices, rolling into a new epoch when exhausted.
    pub fn next_chunk(&mut self) -> Vec<usize> {
        if self.cursor == self.chunks.len() {
            self.epoch += 1;
            self.start_epoch();
        }
        self.cursor += 1;
        self.chunks[self.cursor - 1].clone()
    }
}

/// Right-padded token matrix for one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    /// Row-major `batch_size x seq_len` ids, `[PAD]` after each sequence's end.
    pub ids: Vec<u32>,
    /// `true` at real token positions.
    pub pad_mask: Vec<bool>,
    pub true_lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn pad_count(&self) -> usize {
        self.pad_mask.iter().filter(|m| !**m).count()
    }
}

pub fn pad_to_batch(chunk: &[&TokenSequence]) -> Result<PaddedBatch, CorpusError> {
    let seq_len = chunk
        .iter()
        .map(|s| s.len())
        .max()
        .ok_or(CorpusError::EmptyBatch)?;
    let batch_size = chunk.len();
    let mut ids = vec![PAD; batch_size * seq_len];
    let mut pad_mask = vec![false; batch_size * seq_len];
    for (b, seq) in chunk.iter().enumerate() {
        let row = b * seq_len;
        ids[row..row + seq.len()].copy_from_slice(seq.ids());
        pad_mask[row..row + seq.len()].fill(true);
    }
    Ok(PaddedBatch {
        batch_size,
        seq_len,
        ids,
        pad_mask,
        true_lengths: chunk.iter().map(|s| s.len()).collect(),
    })
}

/// What happened to the input token at a selected position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Replacement {
    Mask,
    Random,
    Kept,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedTarget {
    /// Flat index `b * seq_len + s`.
    pub flat: usize,
    /// Original token id.
    pub label: u32,
    pub replacement: Replacement,
}

/// Selection and replacement probabilities of BERT-style masking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingPolicy {
    pub select_prob: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            select_prob: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    /// Model input ids after replacement.
    pub ids: Vec<u32>,
    pub pad_mask: Vec<bool>,
    pub mask_positions: Vec<bool>,
    /// One entry per masked position, in row-major order.
    pub targets: Vec<MaskedTarget>,
    pub true_lengths: Vec<usize>,
    /// Longest true length divided by `maxlen`.
    pub ratio_r: f64,
    /// Input sequences dropped because they hold only special tokens.
    pub skipped: usize,
}

impl MaskedBatch {
    pub fn labels(&self) -> Vec<usize> {
        self.targets.iter().map(|t| t.label as usize).collect()
    }

    pub fn target_rows(&self) -> Vec<usize> {
        self.targets.iter().map(|t| t.flat).collect()
    }

    /// Input ids with the original labels written back at masked positions.
    pub fn restored_ids(&self) -> Vec<u32> {
        let mut ids = self.ids.clone();
        for t in &self.targets {
            ids[t.flat] = t.label;
        }
        ids
    }
}

/// BERT-style dynamic masking of a chunk. At least one position per sequence is
/// selected; sequences with no eligible position are skipped and counted.
pub fn mask_batch<R: Rng + ?Sized>(
    sequences: &[&TokenSequence],
    vocab_size: usize,
    maxlen: usize,
    policy: &MaskingPolicy,
    rng: &mut R,
) -> Result<MaskedBatch, CorpusError> {
    if vocab_size <= NUM_RESERVED {
        return Err(CorpusError::VocabTooSmall(vocab_size));
    }
    let kept: Vec<&TokenSequence> = sequences.iter().copied().filter(|s| s.len() > 2).collect();
    let skipped = sequences.len() - kept.len();
    if skipped > 0 {
        log::warn!("skipped {skipped} sequence(s) holding only special tokens");
    }
    if let Some(long) = kept.iter().find(|s| s.len() > maxlen) {
        return Err(CorpusError::TooLong {
            len: long.len(),
            maxlen,
        });
    }
    let padded = pad_to_batch(&kept)?;
    let ratio_r = length_ratio(&padded.true_lengths, maxlen)
        .map_err(|e| CorpusError::MalformedSequence(e.to_string()))?;

    let s_len = padded.seq_len;
    let mut ids = padded.ids;
    let mut mask_positions = vec![false; ids.len()];
    let mut targets = Vec::new();
    let mut selected = Vec::new();
    for (b, seq) in kept.iter().enumerate() {
        selected.clear();
        while selected.is_empty() {
            selected.extend(
                seq.eligible()
                    .filter(|_| rng.random::<f64>() < policy.select_prob),
            );
        }
        for &s in &selected {
            let flat = b * s_len + s;
            let u: f64 = rng.random();
            let replacement = if u < policy.mask_prob {
                ids[flat] = MASK;
                Replacement::Mask
            } else if u < policy.mask_prob + policy.random_prob {
                ids[flat] = rng.random_range(NUM_RESERVED as u32..vocab_size as u32);
                Replacement::Random
            } else {
                Replacement::Kept
            };
            mask_positions[flat] = true;
            targets.push(MaskedTarget {
                flat,
                label: seq.ids()[s],
                replacement,
            });
        }
    }
    Ok(MaskedBatch {
        batch_size: padded.batch_size,
        seq_len: s_len,
        ids,
        pad_mask: padded.pad_mask,
        mask_positions,
        targets,
        true_lengths: padded.true_lengths,
        ratio_r,
        skipped,
    })
}
