use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use lenreg_core::calibration::{
    collect_predictions, default_intervals, evaluate_intervals, parse_intervals, IntervalResult,
    LengthInterval, ModelPredictor,
};
use lenreg_core::corpus::{ingest, Dataset, Vocab};
use lenreg_core::encoder::ModelParams;
use lenreg_core::losses::LossMode;

use crate::config::{EvalConfig, Overrides};

pub const THREADS_ENV: &str = "LENREG_THREADS";

/// Worker bound from `LENREG_THREADS`, else the available parallelism.
pub fn threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("{THREADS_ENV} must be a positive integer, got `{v}`"),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn parse_mode(s: &str) -> Result<LossMode, String> {
    s.parse().map_err(|e: lenreg_core::losses::LossError| e.to_string())
}

/// Settings shared by every command that resolves a run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model and schedule preset: nano, mini or base.
    #[arg(long)]
    pub preset: Option<String>,
    /// Entropy weight or hinge scale for cp, cp-l and cp-avg-l.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Maximum smoothing weight for ls-l.
    #[arg(long = "T")]
    pub t: Option<f64>,
    /// Smoothing weight for ls.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Total optimizer steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Training corpus: UTF-8 text, paragraphs separated by blank lines.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Vocabulary file; built from the corpus when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    /// Sequences sampled per length interval.
    #[arg(long)]
    pub n_per_interval: Option<usize>,
    /// Number of equal-width confidence bins.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Length intervals as "a:b,c:d"; one ending at maxlen includes it.
    #[arg(long)]
    pub intervals: Option<String>,
    /// Corpus to evaluate on; defaults to the training corpus.
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
}

impl RunArgs {
    pub fn overrides(&self, mode: Option<LossMode>, seed: Option<u64>, eval: &EvalArgs) -> Overrides {
        Overrides {
            preset: self.preset.clone(),
            mode,
            beta: self.beta,
            t: self.t,
            alpha: self.alpha,
            seed,
            steps: self.steps,
            corpus: self.corpus.clone(),
            vocab: self.vocab.clone(),
            eval_corpus: eval.eval_corpus.clone(),
            n_per_interval: eval.n_per_interval,
            bins: eval.bins,
            intervals: eval.intervals.clone(),
        }
    }
}

pub fn read_units(path: &Path) -> Result<Vec<String>> {
    let raw = std::fs::read(path).with_context(|| format!("reading corpus {}", path.display()))?;
    let units = ingest(&raw).with_context(|| format!("decoding corpus {}", path.display()))?;
    if units.is_empty() {
        bail!("corpus {} contains no paragraphs", path.display());
    }
    Ok(units)
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let file = File::open(path).with_context(|| format!("opening vocab {}", path.display()))?;
    Vocab::read(BufReader::new(file)).with_context(|| format!("reading vocab {}", path.display()))
}

pub fn write_vocab(vocab: &Vocab, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    vocab.write(&mut bytes)?;
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn build_dataset(units: &[String], vocab: &Vocab, maxlen: usize, min_len: Option<usize>) -> Result<Dataset> {
    let ds = Dataset::from_units(units, vocab, maxlen, min_len);
    if ds.is_empty() {
        bail!("no usable sequences after tokenization and length filtering");
    }
    if ds.skipped_empty + ds.skipped_short > 0 {
        log::info!(
            "dropped {} empty and {} short paragraphs",
            ds.skipped_empty,
            ds.skipped_short
        );
    }
    Ok(ds)
}

pub fn intervals_for(eval: &EvalConfig, maxlen: usize) -> Result<Vec<LengthInterval>> {
    Ok(match &eval.intervals {
        Some(text) => parse_intervals(text, maxlen)?,
        None => default_intervals(maxlen),
    })
}

pub fn evaluate(
    params: &ModelParams<f32>,
    data: &Dataset,
    eval: &EvalConfig,
    threads: usize,
) -> Result<Vec<IntervalResult>> {
    let intervals = intervals_for(eval, params.config.maxlen)?;
    let groups = collect_predictions(
        &ModelPredictor { params },
        data,
        &intervals,
        eval.n_per_interval,
        eval.seed,
        threads,
    )?;
    Ok(evaluate_intervals(&groups, eval.bins)?)
}

pub fn create_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
