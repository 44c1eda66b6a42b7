use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Result};
use clap::Args;
use lenreg_core::calibration::IntervalResult;
use lenreg_core::losses::LossMode;
use lenreg_core::trainer::train;
use serde::Serialize;

use crate::common::{build_dataset, create_out_dir, evaluate, intervals_for, parse_mode, read_units, threads, EvalArgs, RunArgs};
use crate::config::{resolve, RunConfig};
use crate::manifest::RunManifest;
use crate::pretrain::prepare;

pub const COMPARISON_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Comma-separated loss modes; at least two entries.
    #[arg(long, value_delimiter = ',', value_parser = parse_mode, required = true)]
    pub modes: Vec<LossMode>,
    /// Comma-separated seeds shared by every mode.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct IntervalSummary {
    pub label: String,
    pub masked_positions: usize,
    pub ece: Option<f64>,
    pub entropy_mean: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MemberResult {
    pub mode: LossMode,
    pub seed: u64,
    /// `None` when the member succeeded.
    pub error: Option<String>,
    pub final_loss: Option<f64>,
    pub intervals: Vec<IntervalSummary>,
}

#[derive(Serialize)]
struct Comparison<'a> {
    format_version: u32,
    modes: &'a [LossMode],
    seeds: &'a [u64],
    intervals: &'a [String],
    members: &'a [MemberResult],
}

fn summarize(results: &[IntervalResult]) -> Vec<IntervalSummary> {
    results
        .iter()
        .map(|r| IntervalSummary {
            label: r.label.clone(),
            masked_positions: r.masked_positions,
            ece: r.ece,
            entropy_mean: r.entropy_mean,
        })
        .collect()
}

fn run_member(
    base: &RunConfig,
    prep_data: &crate::pretrain::Prepared,
    eval_data: &lenreg_core::corpus::Dataset,
    mode: LossMode,
    seed: u64,
    eval_threads: usize,
) -> Result<(f64, Vec<IntervalResult>)> {
    let mut cfg = base.clone();
    cfg.train.regularizer.mode = mode;
    cfg.train.regularizer = lenreg_core::trainer::resolve_regularizer(&cfg.train.regularizer, &prep_data.dataset);
    cfg.train.seed = seed;
    cfg.model.seed = seed;
    let outcome = train(&cfg.model, &cfg.train, &prep_data.dataset, &mut ())?;
    let final_loss = outcome.final_breakdown().total;
    let results = evaluate(&outcome.params, eval_data, &cfg.eval, eval_threads)?;
    Ok((final_loss, results))
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One row per mode and seed in listed order, then a `mean` row per mode.
pub fn comparison_csv(modes: &[LossMode], labels: &[String], members: &[MemberResult]) -> String {
    let mut out = String::from("format_version,mode,seed,status,final_loss");
    for l in labels {
        let _ = write!(out, ",\"ece {l}\",\"entropy {l}\"");
    }
    out.push('\n');
    let per_mode = members.len() / modes.len().max(1);
    for (mi, mode) in modes.iter().enumerate() {
        let rows = &members[mi * per_mode..(mi + 1) * per_mode];
        for m in rows {
            let status = match &m.error {
                None => "ok".to_string(),
                Some(e) => format!("\"failed: {}\"", e.replace('"', "'")),
            };
            let _ = write!(out, "{COMPARISON_FORMAT_VERSION},{mode},{},{status},{}", m.seed, cell(m.final_loss));
            for i in 0..labels.len() {
                let iv = m.intervals.get(i);
                let _ = write!(
                    out,
                    ",{},{}",
                    cell(iv.and_then(|x| x.ece)),
                    cell(iv.and_then(|x| x.entropy_mean))
                );
            }
            out.push('\n');
        }
        let ok: Vec<&MemberResult> = rows.iter().filter(|m| m.error.is_none()).collect();
        let status = if ok.len() == rows.len() { "ok".to_string() } else { format!("partial {}/{}", ok.len(), rows.len()) };
        let _ = write!(
            out,
            "{COMPARISON_FORMAT_VERSION},{mode},mean,{status},{}",
            cell(mean(ok.iter().map(|m| m.final_loss)))
        );
        for i in 0..labels.len() {
            let ece = mean(ok.iter().map(|m| m.intervals.get(i).and_then(|x| x.ece)));
            let ent = mean(ok.iter().map(|m| m.intervals.get(i).and_then(|x| x.entropy_mean)));
            let _ = write!(out, ",{},{}", cell(ece), cell(ent));
        }
        out.push('\n');
    }
    out
}

/// Per interval, how many seeds each listed mode had the lowest ECE on (ties all win).
pub fn wins_csv(modes: &[LossMode], seeds: &[u64], labels: &[String], members: &[MemberResult]) -> String {
    let mut wins = vec![vec![0usize; labels.len()]; modes.len()];
    for (si, _) in seeds.iter().enumerate() {
        for li in 0..labels.len() {
            let eces: Vec<Option<f64>> = (0..modes.len())
                .map(|mi| {
                    let m = &members[mi * seeds.len() + si];
                    if m.error.is_some() {
                        None
                    } else {
                        m.intervals.get(li).and_then(|x| x.ece)
                    }
                })
                .collect();
            let Some(best) = eces.iter().flatten().copied().reduce(f64::min) else { continue };
            for (mi, e) in eces.iter().enumerate() {
                if *e == Some(best) {
                    wins[mi][li] += 1;
                }
            }
        }
    }
    let mut out = String::from("format_version,mode_index,mode,interval,ece_wins,seeds\n");
    for (mi, mode) in modes.iter().enumerate() {
        for (li, l) in labels.iter().enumerate() {
            let _ = writeln!(
                out,
                "{COMPARISON_FORMAT_VERSION},{mi},{mode},\"{l}\",{},{}",
                wins[mi][li],
                seeds.len()
            );
        }
    }
    out
}

pub fn run(args: &CompareArgs) -> Result<u8> {
    if args.modes.len() < 2 {
        bail!("--modes needs at least two entries");
    }
    if args.seeds.is_empty() {
        bail!("--seeds needs at least one seed");
    }
    let ov = args.run.overrides(None, None, &args.eval);
    let config = resolve(args.run.config.as_deref(), &ov)?;
    let prep = prepare(config)?;
    let base = prep.config.clone();
    let eval_data = match &base.data.eval_corpus {
        Some(path) => build_dataset(&read_units(path)?, &prep.vocab, base.model.maxlen, base.data.min_len)?,
        None => prep.dataset.clone(),
    };
    let labels: Vec<String> = intervals_for(&base.eval, base.model.maxlen)?
        .iter()
        .map(|iv| iv.label())
        .collect();

    let mut manifest = RunManifest::start("compare", &base, None)?;
    for input in &prep.inputs {
        manifest.input(input)?;
    }
    if let Some(path) = &base.data.eval_corpus {
        manifest.input(path)?;
    }

    let jobs: Vec<(LossMode, u64)> = args
        .modes
        .iter()
        .flat_map(|&m| args.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let limit = threads()?;
    let workers = limit.min(jobs.len()).max(1);
    let eval_threads = (limit / workers).max(1);
    log::info!("comparing {} runs on {workers} workers", jobs.len());

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<MemberResult>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(mode, seed)) = jobs.get(i) else { break };
                let member = match run_member(&base, &prep, &eval_data, mode, seed, eval_threads) {
                    Ok((loss, results)) => MemberResult {
                        mode,
                        seed,
                        error: None,
                        final_loss: Some(loss),
                        intervals: summarize(&results),
                    },
                    Err(e) => {
                        log::error!("{mode} seed {seed} failed: {e:#}");
                        MemberResult {
                            mode,
                            seed,
                            error: Some(format!("{e:#}")),
                            final_loss: None,
                            intervals: Vec::new(),
                        }
                    }
                };
                log::info!("finished {mode} seed {seed}");
                slots.lock().expect("result lock")[i] = Some(member);
            });
        }
    });
    let members: Vec<MemberResult> = slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|m| m.expect("every job ran"))
        .collect();
    let failed = members.iter().filter(|m| m.error.is_some()).count();

    create_out_dir(&args.out)?;
    let table = comparison_csv(&args.modes, &labels, &members);
    std::fs::write(args.out.join("comparison.csv"), &table)?;
    std::fs::write(
        args.out.join("wins.csv"),
        wins_csv(&args.modes, &args.seeds, &labels, &members),
    )?;
    let mut json = serde_json::to_string_pretty(&Comparison {
        format_version: COMPARISON_FORMAT_VERSION,
        modes: &args.modes,
        seeds: &args.seeds,
        intervals: &labels,
        members: &members,
    })?;
    json.push('\n');
    std::fs::write(args.out.join("comparison.json"), json)?;
    manifest.finish(
        &args.out,
        &["comparison.csv", "wins.csv", "comparison.json"],
        if failed == 0 { "ok" } else { "partial" },
    )?;
    print!("{table}");
    if failed > 0 {
        eprintln!("{failed} of {} runs failed", members.len());
        return Ok(3);
    }
    Ok(0)
}
