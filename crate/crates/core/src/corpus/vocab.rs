use std::collections::HashMap;
use std::io::{BufRead, Write};

use super::text::tokenize;
use super::CorpusError;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_RESERVED: usize = 5;

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Token <-> id bijection with five reserved ids at the front.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Frequency-ranked vocabulary of at most `target_size` entries (reserved ids included).
    /// Ties are broken lexicographically.
    pub fn build<'a, I>(units: I, target_size: usize) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if target_size <= NUM_RESERVED {
            return Err(CorpusError::VocabTooSmall(target_size));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for unit in units {
            for tok in tokenize(unit) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(target_size - NUM_RESERVED);
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t)))
    }

    fn from_tokens<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    /// Vocabulary size `V`, reserved ids included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    /// `[CLS] tokens... [SEP]`, truncated so the result has at most `maxlen` ids.
    pub fn encode(&self, text: &str, maxlen: usize) -> TokenSequence {
        assert!(maxlen >= 2, "maxlen must leave room for [CLS] and [SEP]");
        let mut ids = Vec::with_capacity(maxlen.min(64));
        ids.push(CLS);
        ids.extend(
            tokenize(text)
                .iter()
                .take(maxlen - 2)
                .map(|t| self.id(t)),
        );
        ids.push(SEP);
        TokenSequence { ids }
    }

    /// One token per line; line `i` holds id `i + 5`. Reserved tokens are implicit.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for word in self.words() {
            writeln!(out, "{word}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self, CorpusError> {
        let mut words = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(CorpusError::InvalidVocabFile(format!(
                    "line {}: tokens must be non-empty and contain no whitespace",
                    n + 1
                )));
            }
            if RESERVED_TOKENS.contains(&line.as_str()) || !seen.insert(line.clone()) {
                return Err(CorpusError::InvalidVocabFile(format!(
                    "line {}: duplicate token `{line}`",
                    n + 1
                )));
            }
            words.push(line);
        }
        Ok(Self::from_tokens(words))
    }
}

/// A tokenized unit: `[CLS] ... [SEP]`. Its length is the `len(x)` used by the
/// length ratio, counting specials and never padding.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self, CorpusError> {
        if ids.len() < 2 || ids[0] != CLS || *ids.last().unwrap() != SEP {
            return Err(CorpusError::MalformedSequence(
                "sequence must start with [CLS] and end with [SEP]".into(),
            ));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions that may be selected for masking (everything but the specials).
    pub fn eligible(&self) -> std::ops::Range<usize> {
        1..self.ids.len().saturating_sub(1).max(1)
    }
}
