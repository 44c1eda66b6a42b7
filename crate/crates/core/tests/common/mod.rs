#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use lenreg_core::calibration::{CalibrationError, PredictionSample, Predictor};
use lenreg_core::corpus::synthetic::{MarkovFixture, Regime};
use lenreg_core::corpus::{split_paragraphs, Dataset, MaskedBatch, Vocab};
use num_bigint::BigInt;
use num_rational::BigRational;

pub const FIXTURE_BYTES: usize = 1_000_000;
pub const FIXTURE_SEED: u64 = 42;

pub fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic_markov.txt")
}

pub struct Corpus {
    pub units: Vec<String>,
    pub vocab: Vocab,
    pub dataset: Dataset,
}

pub fn corpus_from_units(units: Vec<String>, maxlen: usize) -> Corpus {
    let vocab = Vocab::build(units.iter().map(String::as_str), 30_522).unwrap();
    let dataset = Dataset::from_units(&units, &vocab, maxlen, None);
    Corpus {
        units,
        vocab,
        dataset,
    }
}

/// The bundled ~1 MB Markov corpus at `maxlen` 128.
pub fn bundled_fixture() -> Corpus {
    let text = std::fs::read_to_string(fixture_path()).expect("bundled fixture present");
    corpus_from_units(split_paragraphs(&text), 128)
}

/// Knows the generating process of the Markov fixture and predicts its exact
/// conditional distribution at every masked position.
pub struct OraclePredictor<'a> {
    pub fixture: &'a MarkovFixture,
    pub vocab: &'a Vocab,
    by_id: HashMap<u32, (usize, usize)>,
    ids: HashMap<(usize, usize), u32>,
}

impl<'a> OraclePredictor<'a> {
    pub fn new(fixture: &'a MarkovFixture, vocab: &'a Vocab) -> Self {
        let mut by_id = HashMap::new();
        let mut ids = HashMap::new();
        for f in 0..fixture.families {
            for i in 0..fixture.fillers {
                let id = vocab.id(&fixture.word(f, i));
                by_id.insert(id, (f, i));
                ids.insert((f, i), id);
            }
        }
        Self {
            fixture,
            vocab,
            by_id,
            ids,
        }
    }
}

impl Predictor for OraclePredictor<'_> {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn predict(&self, batch: &MaskedBatch) -> Result<Vec<Vec<f64>>, CalibrationError> {
        let v = self.vocab.len();
        batch
            .targets
            .iter()
            .map(|t| {
                let len = batch.true_lengths[t.flat / batch.seq_len];
                let &(family, filler) = self
                    .by_id
                    .get(&t.label)
                    .ok_or_else(|| CalibrationError::Predictor(format!("unknown id {}", t.label)))?;
                let regime = self
                    .fixture
                    .regime_of(len - 2)
                    .ok_or_else(|| CalibrationError::Predictor(format!("length {len} fits no regime")))?;
                let mut p = vec![0.0; v];
                match regime {
                    Regime::Short => {
                        for i in 0..self.fixture.fillers {
                            p[self.ids[&(family, i)] as usize] = 1.0 / self.fixture.fillers as f64;
                        }
                    }
                    Regime::Long => p[self.ids[&(family, filler)] as usize] = 1.0,
                }
                Ok(p)
            })
            .collect()
    }
}

fn rational(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

fn int(x: usize) -> BigRational {
    BigRational::from_integer(BigInt::from(x))
}

/// Bin of `c` among `m` bins, by exact rational arithmetic.
pub fn exact_bin(c: f64, m: usize) -> usize {
    let k = (rational(c) * int(m)).floor().to_integer();
    let k: usize = k.to_string().parse().unwrap();
    k.min(m - 1)
}

/// Bin counts and the exact rational ECE of `samples`.
pub fn exact_ece(samples: &[PredictionSample], m: usize) -> (Vec<usize>, BigRational) {
    let mut count = vec![0usize; m];
    let mut gap = vec![int(0); m];
    for s in samples {
        let b = exact_bin(s.confidence, m);
        count[b] += 1;
        gap[b] = gap[b].clone() + int(usize::from(s.correct)) - rational(s.confidence);
    }
    let mut total = int(0);
    for g in gap {
        total = total + if g < int(0) { -g } else { g };
    }
    (count, total / int(samples.len()))
}

pub fn to_f64(x: &BigRational) -> f64 {
    let scale = BigInt::from(1u64) << 200u32;
    let scaled = (x * BigRational::from_integer(scale)).round().to_integer();
    scaled.to_string().parse::<f64>().unwrap() / 2f64.powi(200)
}
