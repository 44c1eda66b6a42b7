use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use lenreg_core::checkpoint::Checkpoint;
use lenreg_core::corpus::{Dataset, Vocab};
use lenreg_core::encoder::ModelParams;
use lenreg_core::losses::{LossMode, RegularizerConfig};
use lenreg_core::trainer::{
    resolve_regularizer, train, OptimState, TrainError, TrainLogRecord, TrainObserver, TrainOutcome,
};

use crate::common::{build_dataset, create_out_dir, parse_mode, read_units, read_vocab, write_vocab, EvalArgs, RunArgs};
use crate::config::{resolve, RunConfig};
use crate::manifest::{sha256_hex, RunManifest};

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Loss mode: mlm, ls, cp, cp-l, cp-avg-l or ls-l.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<LossMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training inputs after loading the corpus and vocabulary.
pub struct Prepared {
    /// With `model.vocab_size` and the cp-avg-l length filled in.
    pub config: RunConfig,
    pub vocab: Vocab,
    pub dataset: Dataset,
    pub inputs: Vec<PathBuf>,
}

pub fn prepare(mut config: RunConfig) -> Result<Prepared> {
    let Some(corpus) = config.data.corpus.clone() else {
        bail!("no training corpus: pass --corpus or set data.corpus");
    };
    let units = read_units(&corpus)?;
    let mut inputs = vec![corpus];
    let vocab = match &config.data.vocab {
        Some(path) => {
            inputs.push(path.clone());
            read_vocab(path)?
        }
        None => Vocab::build(units.iter().map(String::as_str), config.data.vocab_size)?,
    };
    config.model.vocab_size = vocab.len();
    config.model.validate()?;
    let dataset = build_dataset(&units, &vocab, config.model.maxlen, config.data.min_len)?;
    config.train.regularizer = resolve_regularizer(&config.train.regularizer, &dataset);
    Ok(Prepared {
        config,
        vocab,
        dataset,
        inputs,
    })
}

fn vocab_digest(vocab: &Vocab) -> String {
    let mut bytes = Vec::new();
    vocab.write(&mut bytes).expect("writing to memory");
    sha256_hex(&bytes)
}

pub fn checkpoint_meta(config: &RunConfig, vocab: &Vocab, steps_done: u64, reg: &RegularizerConfig) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("preset".into(), config.preset.clone());
    meta.insert("mode".into(), reg.mode.to_string());
    meta.insert("regularizer".into(), serde_json::to_string(reg).unwrap_or_default());
    meta.insert("train_seed".into(), config.train.seed.to_string());
    meta.insert("steps_done".into(), steps_done.to_string());
    meta.insert("vocab_sha256".into(), vocab_digest(vocab));
    meta
}

struct DiskObserver<'a> {
    dir: &'a Path,
    config: &'a RunConfig,
    vocab: &'a Vocab,
    log: BufWriter<File>,
    written: Vec<String>,
}

impl TrainObserver for DiskObserver<'_> {
    fn on_record(&mut self, record: &TrainLogRecord) -> Result<(), TrainError> {
        let line = serde_json::to_string(record).map_err(|e| TrainError::Log(e.to_string()))?;
        writeln!(self.log, "{line}").map_err(|e| TrainError::Log(e.to_string()))?;
        if record.step % (self.config.train.log_every * 10) == 0 {
            log::info!(
                "step {} loss {:.4} entropy {:.3} lr {:.2e}",
                record.step,
                record.total,
                record.entropy_mean,
                record.lr
            );
        }
        Ok(())
    }

    fn on_checkpoint(
        &mut self,
        steps_done: u64,
        params: &ModelParams<f32>,
        optim: &OptimState<f32>,
        regularizer: &RegularizerConfig,
    ) -> Result<(), TrainError> {
        let rel = format!("checkpoints/step-{steps_done}.ckpt");
        let ckpt = Checkpoint {
            params: params.clone(),
            optim: Some(optim.clone()),
            meta: checkpoint_meta(self.config, self.vocab, steps_done, regularizer),
        };
        ckpt.save(&self.dir.join(&rel))
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        self.written.push(rel);
        Ok(())
    }
}

/// Outputs of a training run that stopped on a non-finite value.
pub struct NumericAbort {
    pub written: Vec<String>,
}

/// Trains and writes the log and periodic checkpoints into `dir`.
pub fn train_to_dir(prep: &Prepared, dir: &Path) -> Result<(TrainOutcome, Vec<String>), (anyhow::Error, NumericAbort)> {
    let fail = |e: anyhow::Error| (e, NumericAbort { written: Vec::new() });
    std::fs::create_dir_all(dir.join("checkpoints"))
        .context("creating checkpoint directory")
        .map_err(fail)?;
    let log = File::create(dir.join("log.jsonl"))
        .context("creating log.jsonl")
        .map_err(fail)?;
    let mut observer = DiskObserver {
        dir,
        config: &prep.config,
        vocab: &prep.vocab,
        log: BufWriter::new(log),
        written: vec!["log.jsonl".into()],
    };
    let result = train(&prep.config.model, &prep.config.train, &prep.dataset, &mut observer);
    let flushed = observer.log.flush();
    let mut written = observer.written;
    match result {
        Ok(outcome) => {
            flushed.context("flushing log.jsonl").map_err(fail)?;
            Ok((outcome, written))
        }
        Err(TrainError::NonFinite { step, reason, dump }) => {
            let dumped = std::fs::write(dir.join("nonfinite_dump.json"), format!("{dump}\n"));
            if dumped.is_ok() {
                written.push("nonfinite_dump.json".into());
            }
            let err = anyhow::Error::new(TrainError::NonFinite {
                step,
                reason,
                dump: String::new(),
            });
            Err((err, NumericAbort { written }))
        }
        Err(e) => Err((anyhow::Error::new(e), NumericAbort { written })),
    }
}

pub fn run(args: &PretrainArgs) -> Result<u8> {
    let ov = args.run.overrides(args.mode, args.seed, &EvalArgs::default());
    let config = resolve(args.run.config.as_deref(), &ov)?;
    let prep = prepare(config)?;
    let cfg = &prep.config;
    log::info!(
        "pretraining {} ({} parameters) with {} on {} sequences for {} steps",
        cfg.preset,
        cfg.model.param_count(),
        cfg.train.regularizer.mode,
        prep.dataset.len(),
        cfg.train.total_steps
    );

    let out = &args.out;
    create_out_dir(out)?;
    let mut manifest = RunManifest::start("pretrain", cfg, Some(cfg.train.seed))?;
    for input in &prep.inputs {
        manifest.input(input)?;
    }
    std::fs::write(out.join("config.toml"), toml::to_string(cfg)?)?;
    write_vocab(&prep.vocab, &out.join("vocab.txt"))?;

    let mut outputs: Vec<String> = vec!["config.toml".into(), "vocab.txt".into()];
    match train_to_dir(&prep, out) {
        Ok((outcome, written)) => {
            outputs.extend(written);
            let ckpt = Checkpoint {
                params: outcome.params,
                optim: Some(outcome.optim),
                meta: checkpoint_meta(cfg, &prep.vocab, cfg.train.total_steps, &outcome.regularizer),
            };
            ckpt.save(&out.join("model.ckpt"))?;
            outputs.push("model.ckpt".into());
            let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
            manifest.finish(out, &refs, "ok")?;
            let last = outcome.losses.last().map_or(f64::NAN, |b| b.total);
            println!("final loss {last:.4}; model written to {}", out.join("model.ckpt").display());
            Ok(0)
        }
        Err((err, abort)) => {
            outputs.extend(abort.written);
            let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
            let numeric = matches!(err.downcast_ref::<TrainError>(), Some(TrainError::NonFinite { .. }));
            manifest.finish(out, &refs, if numeric { "numeric-abort" } else { "failed" })?;
            Err(err)
        }
    }
}
