//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test --release --test acceptance -- 2 9`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{bundled_fixture, corpus_from_units, exact_ece, to_f64, Corpus};
use lenreg_core::calibration::{
    collect_predictions, default_intervals, ece, evaluate_intervals, ModelPredictor, PredictionSample,
};
use lenreg_core::checkpoint::Checkpoint;
use lenreg_core::corpus::synthetic::{length_skewed_units, MarkovFixture};
use lenreg_core::corpus::{
    group_by_length, mask_batch, padding_tokens, shuffled_batches, split_paragraphs, MaskingPolicy, Replacement,
    NUM_RESERVED,
};
use lenreg_core::encoder::{forward, EncoderInput, ModelConfig};
use lenreg_core::gradcheck::{check_encoder, check_losses, Fault};
use lenreg_core::losses::{self, LossMode, ProbDist, RegularizerConfig};
use lenreg_core::rng::{self, Stream};
use lenreg_core::trainer::{train, TrainConfig, TrainLogRecord, TrainOutcome};
use rand::RngExt;

const GRADCHECK_INSTANCES: usize = 1000;
const GRADCHECK_BUDGET_S: f64 = 60.0;
const ENCODER_SAMPLES_PER_TENSOR: usize = 1024;
const IDENTITY_TOL: f64 = 1e-12;
const IDENTITY_STEPS: u64 = 200;
const UNIFORM_CE_TOL: f64 = 1e-9;
const ECE_SETS: usize = 1000;
const ECE_VALUE_TOL: f64 = 1e-12;
const CALIBRATED_ECE_MAX: f64 = 0.02;
const SELECT_TOL: f64 = 0.005;
const MIX_TOL: f64 = 0.01;
const MIN_ELIGIBLE: usize = 100_000;
const PADDING_REDUCTION: f64 = 0.5;
const PROGRESS_STEPS: u64 = 2000;
const PROGRESS_RATIO: f64 = 0.7;
const PROGRESS_BUDGET_S: f64 = 30.0 * 60.0;
const MECH_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const MECH_STEPS: u64 = 3000;
const MECH_TRAIN_PARAGRAPHS: usize = 400;
const MECH_EVAL_PARAGRAPHS: usize = 600;
const MECH_LONG_FRACTION: f64 = 0.1;
const MECH_EVAL_PER_INTERVAL: usize = 300;
const MECH_LONG_GAP: f64 = 0.2;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_gradients() -> Check {
    let clock = Instant::now();
    let mut families = check_losses(GRADCHECK_INSTANCES, 1, Fault::None);
    families.extend(check_encoder(&ModelConfig::nano(100), 1, Some(ENCODER_SAMPLES_PER_TENSOR)).map_err(|e| e.to_string())?);
    let secs = clock.elapsed().as_secs_f64();
    let worst: Vec<String> = families
        .iter()
        .map(|f| format!("{} {:.1e}", f.family, f.max_rel_error))
        .collect();
    for f in &families {
        ensure(f.passed, format!("{} max relative error {:.3e} >= {:.0e}", f.family, f.max_rel_error, f.tolerance))?;
        if f.family.starts_with("loss/") {
            ensure(f.checked + f.skipped_near_kink == GRADCHECK_INSTANCES, "instance count")?;
        }
    }
    ensure(secs < GRADCHECK_BUDGET_S, format!("took {secs:.1} s"))?;
    Ok(format!("{secs:.1} s; {}", worst.join(", ")))
}

fn random_rows(rng: &mut rng::StreamRng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let v = rng.random_range(2..=64);
    let rows = rng.random_range(1..=8);
    let logits = (0..rows)
        .map(|_| (0..v).map(|_| rng.random_range(-6.0..6.0)).collect())
        .collect();
    let targets = (0..rows).map(|_| rng.random_range(0..v)).collect();
    (logits, targets)
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn run_diff(a: &TrainOutcome, b: &TrainOutcome) -> f64 {
    let loss = a
        .losses
        .iter()
        .zip(&b.losses)
        .fold(0.0f64, |m, (x, y)| m.max((x.total - y.total).abs()));
    let params = a
        .params
        .tensors()
        .iter()
        .zip(b.params.tensors())
        .flat_map(|(x, y)| x.2.data.iter().zip(&y.2.data).map(|(p, q)| (p - q).abs() as f64).collect::<Vec<_>>())
        .fold(0.0f64, f64::max);
    loss.max(params)
}

fn identity_run(c: &Corpus, maxlen: usize, reg: RegularizerConfig) -> Result<TrainOutcome, String> {
    let model = ModelConfig {
        maxlen,
        ..ModelConfig::nano(c.vocab.len())
    };
    let mut cfg = TrainConfig::nano();
    cfg.total_steps = IDENTITY_STEPS;
    cfg.warmup_steps = 20;
    cfg.batch_size = 16;
    cfg.seed = 5;
    cfg.regularizer = reg;
    train(&model, &cfg, &c.dataset, &mut ()).map_err(|e| e.to_string())
}

fn c2_reductions() -> Check {
    let mut rng = rng::stream(2, Stream::Eval, 0);
    let maxlen = 128;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (logits, targets) = random_rows(&mut rng);
        let r_any = rng.random_range(0.0..=1.0);
        let mlm = RegularizerConfig::with_mode(LossMode::Mlm);
        let reference = losses::batch_loss_with_gradient(&logits, &targets, &mlm, r_any, maxlen).map_err(|e| e.to_string())?;
        let batch_max = rng.random_range(1..=maxlen);
        let r_batch = batch_max as f64 / maxlen as f64;
        let cases = [
            (RegularizerConfig::with_mode(LossMode::CpL), 1.0),
            (RegularizerConfig { alpha: 0.0, ..RegularizerConfig::with_mode(LossMode::Ls) }, r_any),
            (RegularizerConfig { t: rng.random_range(0.0..=1.0), ..RegularizerConfig::with_mode(LossMode::LsL) }, 1.0),
        ];
        for (cfg, r) in cases {
            let got = losses::batch_loss_with_gradient(&logits, &targets, &cfg, r, maxlen).map_err(|e| e.to_string())?;
            let d = (got.breakdown.total - reference.breakdown.total).abs().max(max_diff(&got.grads, &reference.grads));
            ensure(d <= IDENTITY_TOL, format!("{} differs from mlm by {d:e}", cfg.mode))?;
            worst = worst.max(d);
        }
        let beta = rng.random_range(0.1..4.0);
        let cpl = RegularizerConfig { beta, ..RegularizerConfig::with_mode(LossMode::CpL) };
        let avg = RegularizerConfig { beta, avg_len: Some(batch_max as f64), ..RegularizerConfig::with_mode(LossMode::CpAvgL) };
        let a = losses::batch_loss_with_gradient(&logits, &targets, &cpl, r_batch, maxlen).map_err(|e| e.to_string())?;
        let b = losses::batch_loss_with_gradient(&logits, &targets, &avg, r_any, maxlen).map_err(|e| e.to_string())?;
        let d = (a.breakdown.total - b.breakdown.total).abs().max(max_diff(&a.grads, &b.grads));
        ensure(d <= IDENTITY_TOL, format!("cp-avg-l differs from cp-l by {d:e}"))?;
        worst = worst.max(d);
    }

    // training runs: every sequence truncated to maxlen (r = 1), then all of one shorter length
    let full = corpus_from_units(length_skewed_units(256, 70..=90, 21), 64);
    ensure(full.dataset.lengths().iter().all(|&l| l == 64), "full-length corpus")?;
    let mlm = identity_run(&full, 64, RegularizerConfig::with_mode(LossMode::Mlm))?;
    let mut run_worst = 0.0f64;
    for reg in [
        RegularizerConfig::with_mode(LossMode::CpL),
        RegularizerConfig { alpha: 0.0, ..RegularizerConfig::with_mode(LossMode::Ls) },
        RegularizerConfig::with_mode(LossMode::LsL),
    ] {
        let run = identity_run(&full, 64, reg)?;
        let d = run_diff(&mlm, &run);
        ensure(d <= IDENTITY_TOL, format!("{} run differs from mlm by {d:e}", reg.mode))?;
        run_worst = run_worst.max(d);
    }
    let equal = corpus_from_units(length_skewed_units(256, 40..=40, 22), 64);
    let cpl = identity_run(&equal, 64, RegularizerConfig::with_mode(LossMode::CpL))?;
    let avg = identity_run(&equal, 64, RegularizerConfig::with_mode(LossMode::CpAvgL))?;
    ensure(avg.regularizer.avg_len == Some(40.0), "avg_len resolved from the dataset")?;
    let d = run_diff(&cpl, &avg);
    ensure(d <= IDENTITY_TOL, format!("cp-avg-l run differs from cp-l by {d:e}"))?;
    run_worst = run_worst.max(d);
    Ok(format!(
        "loss level max diff {worst:.1e}; {IDENTITY_STEPS}-step runs max diff {run_worst:.1e}"
    ))
}

fn c3_uniform_identity() -> Check {
    let mut rng = rng::stream(3, Stream::Eval, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let v = rng.random_range(2..=2000);
        let scale = rng.random_range(0.01..20.0);
        let logits: Vec<f64> = (0..v).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let y = losses::softmax(&logits).map_err(|e| e.to_string())?;
        let h = losses::uniform_cross_entropy(&y).map_err(|e| e.to_string())?;
        let kl = losses::kl_divergence(&ProbDist::uniform(v), &y).map_err(|e| e.to_string())?;
        let d = (h - kl - (v as f64).ln()).abs();
        ensure(d <= UNIFORM_CE_TOL, format!("V = {v}: off by {d:e}"))?;
        worst = worst.max(d);
    }
    Ok(format!("max deviation {worst:.1e}"))
}

fn c4_ece() -> Check {
    let mut rng = rng::stream(4, Stream::Eval, 0);
    let mut worst = 0.0f64;
    for _ in 0..ECE_SETS {
        let m = rng.random_range(1..=20);
        let n = rng.random_range(1..=300);
        let samples: Vec<PredictionSample> = (0..n)
            .map(|_| {
                let edge = rng.random_range(0..=m) as f64 / m as f64;
                let confidence = match rng.random_range(0..4) {
                    0 => edge,
                    1 => f64::from_bits(edge.to_bits().saturating_sub(1)),
                    _ => rng.random_range(0.0..=1.0),
                };
                PredictionSample {
                    confidence,
                    correct: rng.random_range(0.0..1.0) < confidence,
                    input_length: 1,
                }
            })
            .collect();
        let report = ece(&samples, m).map_err(|e| e.to_string())?;
        let (counts, exact) = exact_ece(&samples, m);
        let got: Vec<usize> = report.bins.iter().map(|b| b.count).collect();
        ensure(got == counts, format!("bin counts {got:?} vs oracle {counts:?}"))?;
        let d = (report.ece - to_f64(&exact)).abs();
        ensure(d <= ECE_VALUE_TOL, format!("ece off oracle by {d:e}"))?;
        worst = worst.max(d);
    }
    let mut rng = rng::stream(4, Stream::Eval, 1);
    let calibrated: Vec<PredictionSample> = (0..100_000)
        .map(|_| {
            let confidence: f64 = rng.random_range(0.0..=1.0);
            PredictionSample {
                confidence,
                correct: rng.random_range(0.0..1.0) < confidence,
                input_length: 1,
            }
        })
        .collect();
    let cal = ece(&calibrated, 10).map_err(|e| e.to_string())?.ece;
    ensure(cal <= CALIBRATED_ECE_MAX, format!("calibrated generator ECE {cal}"))?;
    let s = |confidence, correct| PredictionSample { confidence, correct, input_length: 1 };
    let hand = ece(&[s(0.9, true), s(0.9, false), s(0.6, true), s(0.6, false)], 2).map_err(|e| e.to_string())?.ece;
    ensure(hand == 0.25, format!("hand-worked example gave {hand}"))?;
    Ok(format!("{ECE_SETS} sets match the oracle bins (value diff {worst:.1e}); calibrated ECE {cal:.4}; example {hand}"))
}

fn c5_masking() -> Check {
    let c = corpus_from_units(length_skewed_units(1_000, 100..=128, 5), 128);
    let policy = MaskingPolicy::default();
    let (mut eligible, mut selected) = (0usize, 0usize);
    let mut kinds = [0usize; 3];
    for (i, chunk) in c.dataset.sequences.chunks(32).enumerate() {
        let seqs: Vec<_> = chunk.iter().collect();
        let batch = mask_batch(&seqs, c.vocab.len(), 128, &policy, &mut rng::stream(5, Stream::Masking, i as u64))
            .map_err(|e| e.to_string())?;
        eligible += chunk.iter().map(|s| s.eligible().len()).sum::<usize>();
        selected += batch.targets.len();
        for t in &batch.targets {
            let (b, s) = (t.flat / batch.seq_len, t.flat % batch.seq_len);
            ensure(s >= 1 && s + 1 < batch.true_lengths[b], format!("selected special or pad position {s}"))?;
            ensure((t.label as usize) >= NUM_RESERVED, "selected a reserved token")?;
            let k = match t.replacement {
                Replacement::Mask => 0,
                Replacement::Random => 1,
                Replacement::Kept => 2,
            };
            kinds[k] += 1;
        }
    }
    ensure(eligible >= MIN_ELIGIBLE, format!("only {eligible} eligible tokens"))?;
    let rate = selected as f64 / eligible as f64;
    ensure((rate - 0.15).abs() <= SELECT_TOL, format!("selection rate {rate}"))?;
    let mix: Vec<f64> = kinds.iter().map(|&k| k as f64 / selected as f64).collect();
    for (got, want) in mix.iter().zip([0.8, 0.1, 0.1]) {
        ensure((got - want).abs() <= MIX_TOL, format!("replacement mix {mix:?}"))?;
    }
    Ok(format!(
        "{eligible} eligible tokens, rate {rate:.4}, mix {:.3}/{:.3}/{:.3}",
        mix[0], mix[1], mix[2]
    ))
}

fn c6_bucketing() -> Check {
    let c = corpus_from_units(length_skewed_units(4_000, 8..=128, 6), 128);
    let lengths = c.dataset.lengths();
    let batch = TrainConfig::nano().batch_size;
    let grouped = padding_tokens(&group_by_length(&lengths, batch, &mut rng::stream(6, Stream::Shuffle, 0)), &lengths);
    let shuffled = padding_tokens(&shuffled_batches(lengths.len(), batch, &mut rng::stream(6, Stream::Shuffle, 1)), &lengths);
    let reduction = 1.0 - grouped as f64 / shuffled as f64;
    ensure(reduction >= PADDING_REDUCTION, format!("padding reduced by only {:.1}%", 100.0 * reduction))?;
    Ok(format!("padding {shuffled} -> {grouped} tokens ({:.1}% less)", 100.0 * reduction))
}

fn without_clock(records: &[TrainLogRecord]) -> Vec<TrainLogRecord> {
    records
        .iter()
        .map(|r| TrainLogRecord { wall_ms: 0.0, ..r.clone() })
        .collect()
}

fn c7_progress() -> Check {
    let c = bundled_fixture();
    let model = ModelConfig::nano(c.vocab.len());
    let cfg = TrainConfig::nano();
    ensure(cfg.total_steps == PROGRESS_STEPS && cfg.seed == 42, "nano preset schedule")?;
    let clock = Instant::now();
    let a = train(&model, &cfg, &c.dataset, &mut ()).map_err(|e| e.to_string())?;
    let secs = clock.elapsed().as_secs_f64();
    let n = a.losses.len();
    let first = a.mean_total(0..100);
    let last = a.mean_total(n - 100..n);
    ensure(last <= PROGRESS_RATIO * first, format!("last-100 mean {last:.4} vs first-100 mean {first:.4}"))?;
    ensure(secs <= PROGRESS_BUDGET_S, format!("took {secs:.0} s"))?;
    let b = train(&model, &cfg, &c.dataset, &mut ()).map_err(|e| e.to_string())?;
    ensure(a.params == b.params, "repeat run parameters differ")?;
    ensure(a.losses == b.losses && without_clock(&a.records) == without_clock(&b.records), "repeat run log differs")?;
    Ok(format!(
        "loss {first:.4} -> {last:.4} (ratio {:.3}) in {secs:.0} s; repeat bitwise identical",
        last / first
    ))
}

struct MechRow {
    short_h: f64,
    short_ece: f64,
    long_h: f64,
}

fn c8_mechanism() -> Check {
    let fx = MarkovFixture {
        long_fraction: MECH_LONG_FRACTION,
        ..MarkovFixture::nano()
    };
    let train_units = split_paragraphs(&fx.render(&fx.generate(MECH_TRAIN_PARAGRAPHS, 1000)));
    let eval_units = split_paragraphs(&fx.render(&fx.generate(MECH_EVAL_PARAGRAPHS, 2000)));
    let c = corpus_from_units(train_units, 128);
    let eval = lenreg_core::corpus::Dataset::from_units(&eval_units, &c.vocab, 128, None);
    let intervals = default_intervals(128);
    let run = |mode: LossMode, seed: u64| -> Result<MechRow, String> {
        let model = ModelConfig {
            seed,
            ..ModelConfig::nano(c.vocab.len())
        };
        let mut cfg = TrainConfig::nano();
        cfg.total_steps = MECH_STEPS;
        cfg.warmup_steps = MECH_STEPS / 20;
        cfg.seed = seed;
        cfg.regularizer = RegularizerConfig { beta: 2.0, ..RegularizerConfig::with_mode(mode) };
        let out = train(&model, &cfg, &c.dataset, &mut ()).map_err(|e| e.to_string())?;
        let groups = collect_predictions(&ModelPredictor { params: &out.params }, &eval, &intervals, MECH_EVAL_PER_INTERVAL, 7, 1)
            .map_err(|e| e.to_string())?;
        let r = evaluate_intervals(&groups, 10).map_err(|e| e.to_string())?;
        Ok(MechRow {
            short_h: r[0].entropy_mean.ok_or("empty short interval")?,
            short_ece: r[0].ece.ok_or("empty short interval")?,
            long_h: r[2].entropy_mean.ok_or("empty long interval")?,
        })
    };
    let (mut a, mut b, mut cc) = (0, 0, 0);
    for seed in MECH_SEEDS {
        let mlm = run(LossMode::Mlm, seed)?;
        let cpl = run(LossMode::CpL, seed)?;
        println!(
            "    seed {seed}: short H {:.3} / {:.3}, short ECE {:.4} / {:.4}, long H {:.3} / {:.3} (mlm / cp-l)",
            mlm.short_h, cpl.short_h, mlm.short_ece, cpl.short_ece, mlm.long_h, cpl.long_h
        );
        a += usize::from(cpl.short_h > mlm.short_h);
        b += usize::from(cpl.short_ece <= mlm.short_ece);
        cc += usize::from((cpl.long_h - mlm.long_h).abs() <= MECH_LONG_GAP);
    }
    let summary = format!("(a) {a}/5 short entropy higher, (b) {b}/5 short ECE no worse, (c) {cc}/5 long entropy within {MECH_LONG_GAP}");
    ensure(a >= 4 && b >= 3 && cc >= 3, summary.clone())?;
    Ok(summary)
}

fn c9_checkpoint() -> Check {
    let c = corpus_from_units(length_skewed_units(200, 4..=64, 9), 64);
    let model = ModelConfig {
        maxlen: 64,
        ..ModelConfig::nano(c.vocab.len())
    };
    let mut cfg = TrainConfig::nano();
    cfg.total_steps = 30;
    cfg.warmup_steps = 3;
    let out = train(&model, &cfg, &c.dataset, &mut ()).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    Checkpoint {
        params: out.params.clone(),
        optim: Some(out.optim.clone()),
        meta: Default::default(),
    }
    .save(&path)
    .map_err(|e| e.to_string())?;
    let back = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let seqs: Vec<_> = c.dataset.sequences.iter().take(16).collect();
    let batch = mask_batch(&seqs, c.vocab.len(), 64, &MaskingPolicy::default(), &mut rng::stream(9, Stream::Eval, 0))
        .map_err(|e| e.to_string())?;
    let input = EncoderInput {
        ids: &batch.ids,
        pad_mask: &batch.pad_mask,
        batch: batch.batch_size,
        seq_len: batch.seq_len,
    };
    let x = forward(&out.params, &input, None).map_err(|e| e.to_string())?;
    let y = forward(&back.params, &input, None).map_err(|e| e.to_string())?;
    let same = x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits());
    ensure(same && x.data.len() == y.data.len(), "logits differ after reload")?;
    ensure(back.optim.as_ref() == Some(&out.optim), "optimizer state differs after reload")?;
    Ok(format!("{} logits bitwise equal after reload", x.data.len()))
}

fn c10_hinge() -> Check {
    let mut fractions = Vec::new();
    for c in [bundled_fixture(), corpus_from_units(length_skewed_units(300, 4..=128, 10), 128)] {
        ensure(c.vocab.len() >= 64, "vocabulary below 64")?;
        let mut cfg = TrainConfig::nano();
        cfg.total_steps = 1;
        cfg.warmup_steps = 0;
        cfg.regularizer = RegularizerConfig { beta: 2.0, ..RegularizerConfig::with_mode(LossMode::CpL) };
        let out = train(&ModelConfig::nano(c.vocab.len()), &cfg, &c.dataset, &mut ()).map_err(|e| e.to_string())?;
        let rec = &out.records[0];
        ensure(rec.step == 0, "first record is not step 0")?;
        ensure(rec.hinge_active_fraction == 0.0, format!("hinge active fraction {}", rec.hinge_active_fraction))?;
        fractions.push(format!("V={} entropy {:.3} fraction {}", c.vocab.len(), rec.entropy_mean, rec.hinge_active_fraction));
    }
    Ok(fractions.join("; "))
}

fn main() {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: [(usize, &str, fn() -> Check); 10] = [
        (1, "gradient correctness", c1_gradients),
        (2, "exact reduction identities", c2_reductions),
        (3, "uniform cross-entropy identity", c3_uniform_identity),
        (4, "ECE oracle equivalence", c4_ece),
        (5, "masking statistics", c5_masking),
        (6, "length bucketing", c6_bucketing),
        (7, "training progress", c7_progress),
        (8, "mechanism check", c8_mechanism),
        (9, "checkpoint round-trip", c9_checkpoint),
        (10, "hinge telemetry", c10_hinge),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let clock = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = clock.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {n} ({name}) [{secs:.1} s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}) [{secs:.1} s]: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
