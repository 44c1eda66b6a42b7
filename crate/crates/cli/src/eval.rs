use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use lenreg_core::calibration::{interval_csv, reliability_csv, EvalReport, REPORT_FORMAT_VERSION};
use lenreg_core::checkpoint::Checkpoint;

use crate::common::{build_dataset, create_out_dir, evaluate, read_units, read_vocab, threads, EvalArgs};
use crate::config::{resolve, Overrides};
use crate::manifest::{sha256_file, RunManifest};

#[derive(Debug, Args)]
pub struct EvalEceArgs {
    /// Checkpoint written by `pretrain`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus to evaluate on.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Vocabulary file; defaults to vocab.txt next to the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Seed of the interval sampling and masking streams.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &EvalEceArgs) -> Result<u8> {
    if !args.checkpoint.is_file() {
        bail!("checkpoint {} not found", args.checkpoint.display());
    }
    let ov = Overrides {
        vocab: args.vocab.clone(),
        eval_corpus: args.corpus.clone().or_else(|| args.eval.eval_corpus.clone()),
        n_per_interval: args.eval.n_per_interval,
        bins: args.eval.bins,
        intervals: args.eval.intervals.clone(),
        ..Overrides::default()
    };
    let mut config = resolve(args.config.as_deref(), &ov)?;
    if let Some(seed) = args.seed {
        config.eval.seed = seed;
    }
    let ckpt = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let params = ckpt.params;
    config.model = params.config.clone();

    let Some(corpus) = config.data.eval_corpus.clone().or_else(|| config.data.corpus.clone()) else {
        bail!("no evaluation corpus: pass --corpus or set data.eval_corpus");
    };
    let vocab_path = config.data.vocab.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or_else(|| std::path::Path::new("."))
            .join("vocab.txt")
    });
    let vocab = read_vocab(&vocab_path)?;
    if vocab.len() != params.config.vocab_size {
        bail!(
            "vocabulary {} has {} entries but the checkpoint expects {}",
            vocab_path.display(),
            vocab.len(),
            params.config.vocab_size
        );
    }
    let units = read_units(&corpus)?;
    let dataset = build_dataset(&units, &vocab, params.config.maxlen, config.data.min_len)?;

    let mut manifest = RunManifest::start("eval-ece", &config, Some(config.eval.seed))?;
    manifest.input(&args.checkpoint)?;
    manifest.input(&vocab_path)?;
    manifest.input(&corpus)?;

    let results = evaluate(&params, &dataset, &config.eval, threads()?)?;
    let report = EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        model: args.checkpoint.display().to_string(),
        model_sha256: Some(sha256_file(&args.checkpoint)?),
        seed: config.eval.seed,
        bins: config.eval.bins,
        n_per_interval: config.eval.n_per_interval,
        maxlen: params.config.maxlen,
        intervals: results,
    };

    create_out_dir(&args.out)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(args.out.join("report.json"), json)?;
    std::fs::write(args.out.join("report.csv"), interval_csv(&report.intervals))?;
    std::fs::write(args.out.join("reliability.csv"), reliability_csv(&report.intervals))?;
    manifest.finish(&args.out, &["report.json", "report.csv", "reliability.csv"], "ok")?;

    for r in &report.intervals {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "{:<12} sequences {:>5}  positions {:>6}  ece {}  acc {}  conf {}  entropy {}",
            r.label,
            r.sequences,
            r.masked_positions,
            fmt(r.ece),
            fmt(r.accuracy),
            fmt(r.mean_confidence),
            fmt(r.entropy_mean)
        );
    }
    Ok(0)
}
