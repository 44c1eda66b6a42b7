//! Synthetic corpora with known ground truth.
//!
//! [`MarkovFixture`] emits paragraphs as walks through a cycle of word families.
//! Each family has `K` filler words. In a *short* paragraph every step picks its
//! filler uniformly at random, so the true conditional distribution at any
//! position is uniform over `K` words (entropy `ln K`). In a *long* paragraph
//! the filler index is carried along the whole walk, so any single visible word
//! pins down every other position (entropy 0). Short and long paragraphs have
//! disjoint length ranges, which makes the regime observable from length alone.

use std::ops::RangeInclusive;

use rand::RngExt;

use crate::rng::{self, Stream};

const CONSONANTS: &[u8] = b"bdfghjklmnprstv";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Short,
    Long,
}

/// One generated paragraph as `(family, filler)` steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticParagraph {
    pub regime: Regime,
    pub steps: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovFixture {
    pub families: usize,
    /// Fillers per family, the `K` of the short regime.
    pub fillers: usize,
    /// Content tokens (specials excluded) of a short paragraph.
    pub short_len: RangeInclusive<usize>,
    /// Content tokens (specials excluded) of a long paragraph.
    pub long_len: RangeInclusive<usize>,
    pub long_fraction: f64,
}

impl MarkovFixture {
    /// Layout used with the `nano` preset (`maxlen` 128): short paragraphs stay
    /// inside the `[3, 13)` interval and long ones inside `[118, 128]`.
    pub fn nano() -> Self {
        Self {
            families: 16,
            fillers: 8,
            short_len: 3..=10,
            long_len: 116..=126,
            long_fraction: 0.25,
        }
    }

    pub fn vocab_words(&self) -> usize {
        self.families * self.fillers
    }

    pub fn word(&self, family: usize, filler: usize) -> String {
        let mut w = String::new();
        w.push(CONSONANTS[family % CONSONANTS.len()] as char);
        w.push(VOWELS[(family / CONSONANTS.len()) % VOWELS.len()] as char);
        let wrap = family / (CONSONANTS.len() * VOWELS.len());
        if wrap > 0 {
            w.push_str(&wrap.to_string());
        }
        w.push(CONSONANTS[filler % CONSONANTS.len()] as char);
        if filler >= CONSONANTS.len() {
            w.push_str(&(filler / CONSONANTS.len()).to_string());
        }
        w
    }

    /// Regime implied by a content length, if it falls in either range.
    pub fn regime_of(&self, content_len: usize) -> Option<Regime> {
        if self.short_len.contains(&content_len) {
            Some(Regime::Short)
        } else if self.long_len.contains(&content_len) {
            Some(Regime::Long)
        } else {
            None
        }
    }

    pub fn paragraph(&self, rng: &mut impl rand::Rng) -> SyntheticParagraph {
        let regime = if rng.random::<f64>() < self.long_fraction {
            Regime::Long
        } else {
            Regime::Short
        };
        let range = match regime {
            Regime::Short => self.short_len.clone(),
            Regime::Long => self.long_len.clone(),
        };
        let len = rng.random_range(range);
        let start = rng.random_range(0..self.families);
        let key = rng.random_range(0..self.fillers);
        let steps = (0..len)
            .map(|j| {
                let family = (start + j) % self.families;
                let filler = match regime {
                    Regime::Long => key,
                    Regime::Short => rng.random_range(0..self.fillers),
                };
                (family, filler)
            })
            .collect();
        SyntheticParagraph { regime, steps }
    }

    pub fn generate(&self, paragraphs: usize, seed: u64) -> Vec<SyntheticParagraph> {
        let mut rng = rng::stream(seed, Stream::Synthetic, 0);
        (0..paragraphs).map(|_| self.paragraph(&mut rng)).collect()
    }

    /// Paragraphs until the rendered text reaches `target_bytes`.
    pub fn generate_bytes(&self, target_bytes: usize, seed: u64) -> Vec<SyntheticParagraph> {
        let mut rng = rng::stream(seed, Stream::Synthetic, 0);
        let mut out = Vec::new();
        let mut bytes = 0;
        while bytes < target_bytes {
            let p = self.paragraph(&mut rng);
            bytes += self.render_paragraph(&p).len() + 2;
            out.push(p);
        }
        out
    }

    pub fn render_paragraph(&self, p: &SyntheticParagraph) -> String {
        p.steps
            .iter()
            .map(|&(f, i)| self.word(f, i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Blank-line separated paragraphs, newline terminated.
    pub fn render(&self, paragraphs: &[SyntheticParagraph]) -> String {
        let mut text = paragraphs
            .iter()
            .map(|p| self.render_paragraph(p))
            .collect::<Vec<_>>()
            .join("\n\n");
        text.push('\n');
        text
    }

    /// Ground-truth distribution at step `position` of `p` given every other step:
    /// `(family, filler)` pairs with their probabilities.
    pub fn true_conditional(&self, p: &SyntheticParagraph, position: usize) -> Vec<((usize, usize), f64)> {
        let (family, filler) = p.steps[position];
        match p.regime {
            Regime::Short => (0..self.fillers)
                .map(|i| ((family, i), 1.0 / self.fillers as f64))
                .collect(),
            Regime::Long => vec![((family, filler), 1.0)],
        }
    }
}

/// Paragraphs whose tokenized length (with `[CLS]`/`[SEP]`) is uniform over
/// `lengths`. Words come from a small fixed lexicon.
pub fn length_skewed_units(count: usize, lengths: RangeInclusive<usize>, seed: u64) -> Vec<String> {
    assert!(*lengths.start() >= 3, "need at least one content token");
    let lexicon: Vec<String> = (0..200)
        .map(|i| {
            format!(
                "{}{}{}",
                CONSONANTS[i % CONSONANTS.len()] as char,
                VOWELS[(i / CONSONANTS.len()) % VOWELS.len()] as char,
                i
            )
        })
        .collect();
    let mut rng = rng::stream(seed, Stream::Synthetic, 1);
    (0..count)
        .map(|_| {
            let len = rng.random_range(lengths.clone());
            (0..len - 2)
                .map(|_| lexicon[rng.random_range(0..lexicon.len())].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::text::tokenize;
    use std::collections::{HashMap, HashSet};

    #[test]
    fn words_are_distinct_single_tokens() {
        let fx = MarkovFixture {
            families: 200,
            fillers: 20,
            ..MarkovFixture::nano()
        };
        let mut seen = HashSet::new();
        for f in 0..fx.families {
            for i in 0..fx.fillers {
                let w = fx.word(f, i);
                assert_eq!(tokenize(&w), vec![w.clone()]);
                assert!(seen.insert(w));
            }
        }
    }

    #[test]
    fn ground_truth_by_exact_counting() {
        let fx = MarkovFixture::nano();
        let paras = fx.generate(4000, 11);
        // Long paragraphs: one filler index per paragraph, so each (paragraph, family)
        // slot has exactly one observed filler.
        // Short paragraphs: across the corpus every family slot shows all K fillers.
        let mut short_fillers: HashMap<usize, HashSet<usize>> = HashMap::new();
        let mut short_counts: HashMap<(usize, usize), usize> = HashMap::new();
        let (mut n_short, mut n_long) = (0, 0);
        for p in &paras {
            let n = p.steps.len();
            assert_eq!(fx.regime_of(n), Some(p.regime));
            for w in p.steps.windows(2) {
                assert_eq!(w[1].0, (w[0].0 + 1) % fx.families);
            }
            match p.regime {
                Regime::Long => {
                    n_long += 1;
                    let fillers: HashSet<usize> = p.steps.iter().map(|s| s.1).collect();
                    assert_eq!(fillers.len(), 1);
                    for pos in 0..n {
                        assert_eq!(fx.true_conditional(p, pos).len(), 1);
                    }
                }
                Regime::Short => {
                    n_short += 1;
                    for &(f, i) in &p.steps {
                        short_fillers.entry(f).or_default().insert(i);
                        *short_counts.entry((f, i)).or_default() += 1;
                    }
                }
            }
        }
        assert!(n_long > 800 && n_short > 2600, "{n_long} long / {n_short} short");
        for f in 0..fx.families {
            assert_eq!(short_fillers[&f].len(), fx.fillers);
            let total: usize = (0..fx.fillers).map(|i| short_counts[&(f, i)]).sum();
            for i in 0..fx.fillers {
                let share = short_counts[&(f, i)] as f64 / total as f64;
                assert!((share - 0.125).abs() < 0.03, "family {f} filler {i}: {share}");
            }
        }
        let h: f64 = fx
            .true_conditional(&paras.iter().find(|p| p.regime == Regime::Short).unwrap(), 0)
            .iter()
            .map(|(_, p)| -p * p.ln())
            .sum();
        assert!((h - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rendering_is_deterministic_and_sized() {
        let fx = MarkovFixture::nano();
        let a = fx.render(&fx.generate_bytes(20_000, 5));
        let b = fx.render(&fx.generate_bytes(20_000, 5));
        assert_eq!(a, b);
        assert!(a.len() >= 20_000 && a.len() < 22_000);
        let units = crate::corpus::split_paragraphs(&a);
        assert_eq!(units.len(), fx.generate_bytes(20_000, 5).len());
    }

    #[test]
    fn length_skewed_lengths_cover_range() {
        let units = length_skewed_units(2000, 8..=128, 3);
        let lens: Vec<usize> = units.iter().map(|u| tokenize(u).len() + 2).collect();
        assert_eq!(*lens.iter().min().unwrap(), 8);
        assert_eq!(*lens.iter().max().unwrap(), 128);
    }
}
