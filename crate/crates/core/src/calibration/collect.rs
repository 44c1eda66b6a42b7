use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ece_labeled, CalibrationError, CalibrationReport, LengthInterval, PredictionSample};
use crate::corpus::{mask_batch, Dataset, MaskedBatch, MaskingPolicy};
use crate::encoder::{forward_masked, EncoderInput, ModelParams};
use crate::losses;
use crate::rng::{self, Stream};

const EVAL_BATCH: usize = 32;

/// Anything that yields a predictive distribution at each masked position.
pub trait Predictor: Sync {
    fn vocab_size(&self) -> usize;

    /// One probability row per entry of `batch.targets`, in order.
    fn predict(&self, batch: &MaskedBatch) -> Result<Vec<Vec<f64>>, CalibrationError>;
}

/// Eval-mode forward of a trained encoder.
pub struct ModelPredictor<'a> {
    pub params: &'a ModelParams<f32>,
}

impl Predictor for ModelPredictor<'_> {
    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    fn predict(&self, batch: &MaskedBatch) -> Result<Vec<Vec<f64>>, CalibrationError> {
        let input = EncoderInput {
            ids: &batch.ids,
            pad_mask: &batch.pad_mask,
            batch: batch.batch_size,
            seq_len: batch.seq_len,
        };
        let (logits, _) = forward_masked(self.params, &input, &batch.target_rows(), None)
            .map_err(|e| CalibrationError::Predictor(e.to_string()))?;
        logits
            .chunks(self.vocab_size())
            .map(|row| {
                let row: Vec<f64> = row.iter().map(|&x| x as f64).collect();
                losses::softmax(&row)
                    .map(|d| d.probs().to_vec())
                    .map_err(|e| CalibrationError::Predictor(e.to_string()))
            })
            .collect()
    }
}

/// Predictions gathered from one length interval.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSamples {
    pub interval: LengthInterval,
    /// Sequences in the dataset that fall in the interval.
    pub available: usize,
    /// Sequences actually sampled.
    pub sequences: usize,
    pub samples: Vec<PredictionSample>,
    /// Entropy (nats) of the predictive distribution at each sample.
    pub entropies: Vec<f64>,
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

fn predict_all(
    predictor: &dyn Predictor,
    batches: &[MaskedBatch],
    threads: usize,
) -> Result<Vec<Vec<Vec<f64>>>, CalibrationError> {
    let threads = threads.clamp(1, batches.len().max(1));
    if threads == 1 {
        return batches.iter().map(|b| predictor.predict(b)).collect();
    }
    let per = batches.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = batches
            .chunks(per)
            .map(|group| {
                scope.spawn(move || {
                    group
                        .iter()
                        .map(|b| predictor.predict(b))
                        .collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(batches.len());
        for h in handles {
            out.extend(h.join().expect("prediction worker panicked")?);
        }
        Ok(out)
    })
}

/// Samples up to `per_interval_n` sequences per interval, masks them with a
/// fresh evaluation stream and records one sample per masked position.
///
/// Results depend only on `seed`, never on `threads`.
pub fn collect_predictions(
    predictor: &dyn Predictor,
    dataset: &Dataset,
    intervals: &[LengthInterval],
    per_interval_n: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<IntervalSamples>, CalibrationError> {
    super::check_disjoint(intervals)?;
    let vocab = predictor.vocab_size();
    let policy = MaskingPolicy::default();
    let mut out = Vec::with_capacity(intervals.len());
    for (i, iv) in intervals.iter().enumerate() {
        let mut picked: Vec<usize> = (0..dataset.len())
            .filter(|&j| iv.contains(dataset.sequences[j].len()))
            .collect();
        let available = picked.len();
        if available > per_interval_n {
            let mut srng = rng::stream(seed, Stream::Eval, 2 * i as u64);
            let (chosen, _) = picked.partial_shuffle(&mut srng, per_interval_n);
            picked = chosen.to_vec();
        }
        picked.sort_by_key(|&j| (dataset.sequences[j].len(), j));

        let mut mrng = rng::stream(seed, Stream::Eval, 2 * i as u64 + 1);
        let batches = picked
            .chunks(EVAL_BATCH)
            .map(|chunk| {
                let seqs: Vec<_> = chunk.iter().map(|&j| &dataset.sequences[j]).collect();
                mask_batch(&seqs, vocab, dataset.maxlen, &policy, &mut mrng)
                    .map_err(|e| CalibrationError::InvalidArgument(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let probs = predict_all(predictor, &batches, threads)?;

        let mut samples = Vec::new();
        let mut entropies = Vec::new();
        for (batch, rows) in batches.iter().zip(probs) {
            if rows.len() != batch.targets.len() {
                return Err(CalibrationError::Predictor(format!(
                    "predictor returned {} rows for {} targets",
                    rows.len(),
                    batch.targets.len()
                )));
            }
            for (t, p) in batch.targets.iter().zip(rows) {
                let (arg, conf) = losses::argmax(&p);
                samples.push(PredictionSample {
                    confidence: conf.clamp(0.0, 1.0),
                    correct: arg == t.label as usize,
                    input_length: batch.true_lengths[t.flat / batch.seq_len],
                });
                entropies.push(entropy(&p));
            }
        }
        out.push(IntervalSamples {
            interval: *iv,
            available,
            sequences: picked.len(),
            samples,
            entropies,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalEntropy {
    pub label: String,
    pub count: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyProfile {
    pub intervals: Vec<IntervalEntropy>,
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

/// Mean and (population) standard deviation of masked-position entropy per interval.
pub fn entropy_profile(groups: &[IntervalSamples]) -> EntropyProfile {
    EntropyProfile {
        intervals: groups
            .iter()
            .map(|g| {
                let (mean, std) = mean_std(&g.entropies);
                IntervalEntropy {
                    label: g.interval.label(),
                    count: g.entropies.len(),
                    mean,
                    std,
                }
            })
            .collect(),
    }
}

/// Calibration and entropy summary of one interval; `report` is `None` when
/// the interval had no matching sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalResult {
    pub interval: LengthInterval,
    pub label: String,
    pub available: usize,
    pub sequences: usize,
    pub masked_positions: usize,
    pub ece: Option<f64>,
    pub accuracy: Option<f64>,
    pub mean_confidence: Option<f64>,
    pub entropy_mean: Option<f64>,
    pub entropy_std: Option<f64>,
    pub report: Option<CalibrationReport>,
}

pub fn evaluate_intervals(
    groups: &[IntervalSamples],
    bins: usize,
) -> Result<Vec<IntervalResult>, CalibrationError> {
    groups
        .iter()
        .map(|g| {
            let label = g.interval.label();
            let report = if g.samples.is_empty() {
                None
            } else {
                Some(ece_labeled(&g.samples, bins, &label)?)
            };
            let n = g.samples.len() as f64;
            let (accuracy, mean_confidence) = if g.samples.is_empty() {
                (None, None)
            } else {
                (
                    Some(g.samples.iter().filter(|s| s.correct).count() as f64 / n),
                    Some(g.samples.iter().map(|s| s.confidence).sum::<f64>() / n),
                )
            };
            let (entropy_mean, entropy_std) = mean_std(&g.entropies);
            Ok(IntervalResult {
                interval: g.interval,
                label,
                available: g.available,
                sequences: g.sequences,
                masked_positions: g.samples.len(),
                ece: report.as_ref().map(|r| r.ece),
                accuracy,
                mean_confidence,
                entropy_mean,
                entropy_std,
                report,
            })
        })
        .collect()
}
