use super::vocab::{TokenSequence, Vocab};

/// Tokenized paragraphs ready for batching.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<TokenSequence>,
    pub maxlen: usize,
    /// Units dropped because they tokenized to nothing.
    pub skipped_empty: usize,
    /// Units dropped by the minimum-length filter.
    pub skipped_short: usize,
}

impl Dataset {
    /// Tokenize and truncate every unit. `min_len`, when set, drops sequences
    /// whose length (specials included) is below it.
    pub fn from_units<S: AsRef<str>>(
        units: &[S],
        vocab: &Vocab,
        maxlen: usize,
        min_len: Option<usize>,
    ) -> Self {
        let mut sequences = Vec::with_capacity(units.len());
        let mut skipped_empty = 0;
        let mut skipped_short = 0;
        for unit in units {
            let seq = vocab.encode(unit.as_ref(), maxlen);
            if seq.len() <= 2 {
                skipped_empty += 1;
            } else if min_len.is_some_and(|m| seq.len() < m) {
                skipped_short += 1;
            } else {
                sequences.push(seq);
            }
        }
        Self {
            sequences,
            maxlen,
            skipped_empty,
            skipped_short,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.sequences.iter().map(TokenSequence::len).collect()
    }

    /// Mean tokenized length, the dataset-level stand-in for `len(x)` in CP-AvgL.
    pub fn mean_length(&self) -> Option<f64> {
        if self.sequences.is_empty() {
            return None;
        }
        let total: usize = self.sequences.iter().map(TokenSequence::len).sum();
        Some(total as f64 / self.sequences.len() as f64)
    }
}
