//! Expected calibration error, reliability bins and masked-position entropy
//! profiles sliced by input length.

mod collect;
mod report;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use collect::{
    collect_predictions, entropy_profile, evaluate_intervals, EntropyProfile, IntervalEntropy,
    IntervalResult, IntervalSamples, ModelPredictor, Predictor,
};
pub use report::{interval_csv, reliability_csv, EvalReport, REPORT_FORMAT_VERSION};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("no samples to calibrate")]
    Empty,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("prediction failed: {0}")]
    Predictor(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionSample {
    /// Maximum predicted probability.
    pub confidence: f64,
    /// Whether the argmax equals the original token.
    pub correct: bool,
    /// True length (tokens, specials included) of the input sequence.
    pub input_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub n: usize,
    pub ece: f64,
    pub interval_label: String,
}

impl CalibrationReport {
    /// The ECE sum evaluated from the stored bins.
    pub fn ece_from_bins(&self) -> f64 {
        let n = self.n as f64;
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| {
                let gap = (b.accuracy.unwrap_or(0.0) - b.mean_confidence.unwrap_or(0.0)).abs();
                b.count as f64 / n * gap
            })
            .sum()
    }
}

/// Bin of `confidence` among `m` equal-width bins over `[0, 1]`.
///
/// Lower edges belong to their bin; 1.0 falls in the last bin. The product
/// `confidence * m` is floored exactly, so a confidence just below an edge is
/// never pushed up by rounding.
pub fn bin_index(confidence: f64, m: usize) -> usize {
    let mf = m as f64;
    let p = confidence * mf;
    let k = p.floor();
    // exact residual of the product
    let err = confidence.mul_add(mf, -p);
    let k = if p == k && err < 0.0 { k - 1.0 } else { k };
    (k.max(0.0) as usize).min(m - 1)
}

/// Expected calibration error with `m` equal-width bins.
pub fn ece(samples: &[PredictionSample], m: usize) -> Result<CalibrationReport, CalibrationError> {
    ece_labeled(samples, m, "all")
}

pub fn ece_labeled(
    samples: &[PredictionSample],
    m: usize,
    label: &str,
) -> Result<CalibrationReport, CalibrationError> {
    if samples.is_empty() {
        return Err(CalibrationError::Empty);
    }
    if m == 0 {
        return Err(CalibrationError::InvalidArgument("bin count must be positive".into()));
    }
    if let Some(s) = samples.iter().find(|s| !(0.0..=1.0).contains(&s.confidence)) {
        return Err(CalibrationError::InvalidArgument(format!(
            "confidence {} outside [0, 1]",
            s.confidence
        )));
    }
    let mut count = vec![0usize; m];
    let mut correct = vec![0usize; m];
    let mut conf_sum = vec![0.0f64; m];
    for s in samples {
        let b = bin_index(s.confidence, m);
        count[b] += 1;
        correct[b] += usize::from(s.correct);
        conf_sum[b] += s.confidence;
    }
    let n = samples.len();
    let mut bins = Vec::with_capacity(m);
    let mut total = 0.0;
    for b in 0..m {
        let (mean_confidence, accuracy) = if count[b] > 0 {
            let c = count[b] as f64;
            let conf = conf_sum[b] / c;
            let acc = correct[b] as f64 / c;
            total += c / n as f64 * (acc - conf).abs();
            (Some(conf), Some(acc))
        } else {
            (None, None)
        };
        bins.push(CalibrationBin {
            lo: b as f64 / m as f64,
            hi: (b + 1) as f64 / m as f64,
            count: count[b],
            mean_confidence,
            accuracy,
        });
    }
    Ok(CalibrationReport {
        bins,
        n,
        ece: total,
        interval_label: label.to_string(),
    })
}

/// A token-length interval `[lo, hi)`, or `[lo, hi]` when `closed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthInterval {
    pub lo: usize,
    pub hi: usize,
    pub closed: bool,
}

impl LengthInterval {
    pub fn contains(&self, len: usize) -> bool {
        len >= self.lo && (len < self.hi || (self.closed && len == self.hi))
    }

    pub fn label(&self) -> String {
        format!("[{}, {}{}", self.lo, self.hi, if self.closed { "]" } else { ")" })
    }
}

impl fmt::Display for LengthInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn scale(x: usize, maxlen: usize) -> usize {
    // round half away from zero
    (x as f64 * maxlen as f64 / 512.0).round() as usize
}

/// `[10, 50) [50, 200) [200, 512]` at `maxlen` 512, scaled proportionally otherwise.
pub fn default_intervals(maxlen: usize) -> Vec<LengthInterval> {
    let (a, b, c) = (scale(10, maxlen), scale(50, maxlen), scale(200, maxlen));
    vec![
        LengthInterval { lo: a, hi: b, closed: false },
        LengthInterval { lo: b, hi: c, closed: false },
        LengthInterval { lo: c, hi: maxlen, closed: true },
    ]
}

/// Parses `"a:b,c:d"`. Intervals are half-open except one ending at `maxlen`,
/// which includes it.
pub fn parse_intervals(text: &str, maxlen: usize) -> Result<Vec<LengthInterval>, CalibrationError> {
    let mut out: Vec<LengthInterval> = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (lo, hi) = part
            .split_once(':')
            .ok_or_else(|| CalibrationError::InvalidArgument(format!("interval `{part}` is not `lo:hi`")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CalibrationError::InvalidArgument(format!("bad bound `{s}` in `{part}`")))
        };
        let (lo, hi) = (parse(lo)?, parse(hi)?);
        if lo >= hi {
            return Err(CalibrationError::InvalidArgument(format!("empty interval `{part}`")));
        }
        out.push(LengthInterval { lo, hi, closed: hi >= maxlen });
    }
    if out.is_empty() {
        return Err(CalibrationError::InvalidArgument("no intervals given".into()));
    }
    check_disjoint(&out)?;
    Ok(out)
}

pub fn check_disjoint(intervals: &[LengthInterval]) -> Result<(), CalibrationError> {
    for (i, a) in intervals.iter().enumerate() {
        for b in &intervals[i + 1..] {
            let a_end = if a.closed { a.hi + 1 } else { a.hi };
            let b_end = if b.closed { b.hi + 1 } else { b.hi };
            if a.lo < b_end && b.lo < a_end {
                return Err(CalibrationError::InvalidArgument(format!(
                    "intervals {a} and {b} overlap"
                )));
            }
        }
    }
    Ok(())
}
