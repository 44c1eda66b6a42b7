use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::IntervalResult;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Everything one evaluation run produces, serialized as the JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    /// Checkpoint path or other model identity.
    pub model: String,
    pub model_sha256: Option<String>,
    pub seed: u64,
    pub bins: usize,
    pub n_per_interval: usize,
    pub maxlen: usize,
    pub intervals: Vec<IntervalResult>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// One row per interval and metric: `interval,metric,value`.
pub fn interval_csv(results: &[IntervalResult]) -> String {
    let mut out = String::from("format_version,interval,metric,value\n");
    for r in results {
        let rows: [(&str, String); 7] = [
            ("sequences", r.sequences.to_string()),
            ("masked_positions", r.masked_positions.to_string()),
            ("ece", opt(r.ece)),
            ("accuracy", opt(r.accuracy)),
            ("mean_confidence", opt(r.mean_confidence)),
            ("entropy_mean", opt(r.entropy_mean)),
            ("entropy_std", opt(r.entropy_std)),
        ];
        for (metric, value) in rows {
            let _ = writeln!(out, "{REPORT_FORMAT_VERSION},\"{}\",{metric},{value}", r.label);
        }
    }
    out
}

/// Reliability-diagram data: per interval and bin, the midpoint against accuracy.
pub fn reliability_csv(results: &[IntervalResult]) -> String {
    let mut out =
        String::from("format_version,interval,bin,lo,hi,midpoint,count,accuracy,mean_confidence\n");
    for r in results {
        let Some(report) = &r.report else { continue };
        for (i, b) in report.bins.iter().enumerate() {
            let _ = writeln!(
                out,
                "{REPORT_FORMAT_VERSION},\"{}\",{i},{},{},{},{},{},{}",
                r.label,
                b.lo,
                b.hi,
                (b.lo + b.hi) / 2.0,
                b.count,
                opt(b.accuracy),
                opt(b.mean_confidence)
            );
        }
    }
    out
}
