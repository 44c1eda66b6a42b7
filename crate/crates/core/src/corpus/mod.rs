//! Text ingestion, vocabulary, masking and length-grouped batching.

mod batching;
mod dataset;
pub mod synthetic;
mod text;
mod vocab;

use thiserror::Error;

pub use batching::{
    group_by_length, mask_batch, pad_to_batch, padding_tokens, shuffled_batches, EpochBatcher,
    MaskedBatch, MaskedTarget, MaskingPolicy, PaddedBatch, Replacement,
};
pub use dataset::Dataset;
pub use text::{ingest, split_paragraphs, tokenize};
pub use vocab::{
    TokenSequence, Vocab, CLS, MASK, NUM_RESERVED, PAD, RESERVED_TOKENS, SEP, UNK,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid UTF-8 at byte offset {offset}")]
    Encoding { offset: usize },
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("vocabulary size {0} leaves no room beyond the 5 reserved ids")]
    VocabTooSmall(usize),
    #[error("invalid vocabulary file: {0}")]
    InvalidVocabFile(String),
    #[error("malformed sequence: {0}")]
    MalformedSequence(String),
    #[error("sequence of length {len} exceeds maxlen {maxlen}")]
    TooLong { len: usize, maxlen: usize },
    #[error("batch has no maskable sequences")]
    EmptyBatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
