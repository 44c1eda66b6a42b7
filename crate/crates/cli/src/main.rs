mod common;
mod compare;
mod config;
mod eval;
mod gradcheck;
mod manifest;
mod prep;
mod pretrain;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lenreg_core::trainer::TrainError;

/// Masked-language-model pre-training with length-adaptive confidence
/// regularization, and the calibration tooling to evaluate it.
///
/// Exit codes: 0 success, 1 usage or input error, 2 numeric abort during
/// training, 3 comparison finished with failed member runs.
#[derive(Debug, Parser)]
#[command(name = "lenreg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a frequency-ranked vocabulary file from a corpus.
    BuildVocab(prep::BuildVocabArgs),
    /// Write the synthetic Markov corpus with known ground-truth entropies.
    SynthCorpus(prep::SynthCorpusArgs),
    /// Pre-train an encoder from scratch.
    Pretrain(pretrain::PretrainArgs),
    /// Length-sliced calibration and entropy report for a checkpoint.
    EvalEce(eval::EvalEceArgs),
    /// Finite-difference check of every loss mode and the encoder.
    Gradcheck(gradcheck::GradcheckArgs),
    /// Train several modes over shared seeds and tabulate calibration.
    Compare(compare::CompareArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::BuildVocab(a) => prep::build_vocab(a),
        Command::SynthCorpus(a) => prep::synth_corpus(a),
        Command::Pretrain(a) => pretrain::run(a),
        Command::EvalEce(a) => eval::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
        Command::Compare(a) => compare::run(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if matches!(e.downcast_ref::<TrainError>(), Some(TrainError::NonFinite { .. })) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
