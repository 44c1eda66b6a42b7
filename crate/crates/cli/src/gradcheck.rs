use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use lenreg_core::encoder::ModelConfig;
use lenreg_core::gradcheck::{check_encoder, check_losses, Fault, FamilyResult};
use serde::Serialize;

use crate::common::create_out_dir;
use crate::manifest::RunManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InjectFault {
    EntropySign,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "nano")]
    pub preset: String,
    /// Random problems per loss mode.
    #[arg(long, default_value_t = 1000)]
    pub instances: usize,
    /// Coordinates perturbed per encoder tensor; 0 checks every coordinate.
    #[arg(long, default_value_t = 256)]
    pub samples_per_tensor: usize,
    /// Vocabulary size of the encoder under test.
    #[arg(long, default_value_t = 100)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true, value_enum)]
    pub inject_fault: Option<InjectFault>,
    /// Also write gradcheck.json and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Settings<'a> {
    preset: &'a str,
    instances: usize,
    samples_per_tensor: usize,
    vocab_size: usize,
    fault: Option<&'a str>,
}

#[derive(Serialize)]
struct GradcheckReport {
    format_version: u32,
    passed: bool,
    families: Vec<FamilyResult>,
}

pub fn run(args: &GradcheckArgs) -> Result<u8> {
    let model = ModelConfig::preset(&args.preset, args.vocab_size)
        .with_context(|| format!("unknown preset `{}`", args.preset))?;
    model.validate()?;
    let fault = match args.inject_fault {
        Some(InjectFault::EntropySign) => Fault::EntropySign,
        None => Fault::None,
    };
    let manifest = RunManifest::start(
        "gradcheck",
        Settings {
            preset: &args.preset,
            instances: args.instances,
            samples_per_tensor: args.samples_per_tensor,
            vocab_size: args.vocab_size,
            fault: args.inject_fault.map(|_| "entropy-sign"),
        },
        Some(args.seed),
    )?;

    let clock = Instant::now();
    let mut families = check_losses(args.instances, args.seed, fault);
    let samples = (args.samples_per_tensor > 0).then_some(args.samples_per_tensor);
    families.extend(check_encoder(&model, args.seed, samples)?);
    let passed = families.iter().all(|f| f.passed);

    println!("{:<22} {:>8} {:>8} {:>14} {:>10}  result", "family", "checked", "skipped", "max_rel_error", "tolerance");
    for f in &families {
        println!(
            "{:<22} {:>8} {:>8} {:>14.3e} {:>10.0e}  {}",
            f.family,
            f.checked,
            f.skipped_near_kink,
            f.max_rel_error,
            f.tolerance,
            if f.passed { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "{} in {:.1} s",
        if passed { "all gradients PASS" } else { "gradient check FAILED" },
        clock.elapsed().as_secs_f64()
    );

    if let Some(out) = &args.out {
        create_out_dir(out)?;
        let report = GradcheckReport {
            format_version: 1,
            passed,
            families,
        };
        let mut json = serde_json::to_string_pretty(&report)?;
        json.push('\n');
        std::fs::write(out.join("gradcheck.json"), json)?;
        manifest.finish(out, &["gradcheck.json"], if passed { "ok" } else { "failed" })?;
    }
    Ok(if passed { 0 } else { 1 })
}
