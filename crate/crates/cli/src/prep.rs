use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use lenreg_core::corpus::synthetic::MarkovFixture;
use lenreg_core::corpus::Vocab;
use serde::Serialize;

use crate::common::{create_out_dir, read_units, write_vocab};
use crate::manifest::RunManifest;

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary size including the five reserved tokens.
    #[arg(long, default_value_t = 30_522)]
    pub vocab_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct VocabSettings {
    vocab_size: usize,
}

pub fn build_vocab(args: &BuildVocabArgs) -> Result<u8> {
    let mut manifest = RunManifest::start(
        "build-vocab",
        VocabSettings { vocab_size: args.vocab_size },
        None,
    )?;
    manifest.input(&args.corpus)?;
    let units = read_units(&args.corpus)?;
    let vocab = Vocab::build(units.iter().map(String::as_str), args.vocab_size)?;
    create_out_dir(&args.out)?;
    write_vocab(&vocab, &args.out.join("vocab.txt"))?;
    if vocab.len() < args.vocab_size {
        log::warn!(
            "corpus has only {} distinct tokens; vocabulary size is {}",
            vocab.len() - 5,
            vocab.len()
        );
    }
    manifest.finish(&args.out, &["vocab.txt"], "ok")?;
    println!("wrote {} tokens to {}", vocab.len(), args.out.join("vocab.txt").display());
    Ok(0)
}

#[derive(Debug, Args)]
pub struct SynthCorpusArgs {
    /// Approximate size of the rendered corpus.
    #[arg(long, default_value_t = 1_000_000)]
    pub bytes: usize,
    /// Exact paragraph count; takes precedence over --bytes.
    #[arg(long)]
    pub paragraphs: Option<usize>,
    /// Share of long (deterministic) paragraphs.
    #[arg(long)]
    pub long_fraction: Option<f64>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct SynthSettings {
    bytes: usize,
    paragraphs: Option<usize>,
    families: usize,
    fillers: usize,
    long_fraction: f64,
}

pub fn synth_corpus(args: &SynthCorpusArgs) -> Result<u8> {
    let mut fixture = MarkovFixture::nano();
    if let Some(f) = args.long_fraction {
        anyhow::ensure!((0.0..=1.0).contains(&f), "--long-fraction must lie in [0, 1]");
        fixture.long_fraction = f;
    }
    let manifest = RunManifest::start(
        "synth-corpus",
        SynthSettings {
            bytes: args.bytes,
            paragraphs: args.paragraphs,
            families: fixture.families,
            fillers: fixture.fillers,
            long_fraction: fixture.long_fraction,
        },
        Some(args.seed),
    )?;
    let paragraphs = match args.paragraphs {
        Some(n) => fixture.generate(n, args.seed),
        None => fixture.generate_bytes(args.bytes, args.seed),
    };
    create_out_dir(&args.out)?;
    std::fs::write(args.out.join("corpus.txt"), fixture.render(&paragraphs))?;
    manifest.finish(&args.out, &["corpus.txt"], "ok")?;
    println!("wrote {} paragraphs to {}", paragraphs.len(), args.out.join("corpus.txt").display());
    Ok(0)
}
