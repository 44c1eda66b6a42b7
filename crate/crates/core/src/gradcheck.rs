//! Finite-difference verification of the loss gradients and the encoder's
//! reverse-mode gradients.

use rand::seq::index;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderInput, ModelConfig, ModelParams};
use crate::losses::{self, LossMode, RegularizerConfig};
use crate::rng::{self, Stream};

pub const LOSS_STEP: f64 = 1e-5;
pub const LOSS_TOLERANCE: f64 = 1e-4;
/// Instances with a hinge argument this close to zero are not checked.
pub const KINK_MARGIN: f64 = 1e-6;
pub const ENCODER_STEP: f64 = 1e-4;
pub const ENCODER_TOLERANCE: f64 = 1e-3;

/// Deliberate gradient corruption, used to show the checker catches it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    EntropySign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyResult {
    pub family: String,
    pub checked: usize,
    pub skipped_near_kink: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl FamilyResult {
    fn new(family: String, tolerance: f64) -> Self {
        Self {
            family,
            checked: 0,
            skipped_near_kink: 0,
            max_rel_error: 0.0,
            tolerance,
            passed: true,
        }
    }

    fn record(&mut self, err: f64) {
        self.checked += 1;
        if err.is_nan() || err > self.max_rel_error {
            self.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
        }
        self.passed = self.max_rel_error < self.tolerance;
    }
}

/// `max|a - n| / max(max|a|, max|n|, floor)` over paired entries.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(floor, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}

struct LossInstance {
    logits: Vec<Vec<f64>>,
    targets: Vec<usize>,
    config: RegularizerConfig,
    r: f64,
    maxlen: usize,
}

fn random_instance(mode: LossMode, rng: &mut rng::StreamRng) -> LossInstance {
    let v = rng.random_range(2..=16);
    let rows = rng.random_range(1..=4);
    let scale = rng.random_range(0.1..4.0);
    let logits = (0..rows)
        .map(|_| (0..v).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
        .collect();
    let targets = (0..rows).map(|_| rng.random_range(0..v)).collect();
    let maxlen = 128;
    let config = RegularizerConfig {
        mode,
        beta: rng.random_range(0.1..3.0),
        alpha: rng.random_range(0.0..1.0),
        t: rng.random_range(0.0..1.0),
        avg_len: Some(rng.random_range(1.0..maxlen as f64)),
    };
    LossInstance {
        logits,
        targets,
        config,
        r: rng.random_range(0.0..=1.0),
        maxlen,
    }
}

fn near_kink(inst: &LossInstance) -> bool {
    if !inst.config.mode.has_hinge() {
        return false;
    }
    let r = inst.config.effective_ratio(inst.r, inst.maxlen);
    let threshold = inst.config.beta * (1.0 - r);
    inst.logits.iter().any(|row| {
        let h = losses::softmax(row).map(|d| losses::entropy(&d)).unwrap_or(0.0);
        (threshold - h).abs() < KINK_MARGIN
    })
}

/// `instances` random problems per loss mode with vocabularies of at most 16.
pub fn check_losses(instances: usize, seed: u64, fault: Fault) -> Vec<FamilyResult> {
    LossMode::ALL
        .into_iter()
        .enumerate()
        .map(|(mi, mode)| {
            let mut fam = FamilyResult::new(format!("loss/{mode}"), LOSS_TOLERANCE);
            let mut rng = rng::stream(seed, Stream::Eval, 100 + mi as u64);
            for _ in 0..instances {
                let inst = random_instance(mode, &mut rng);
                if near_kink(&inst) {
                    fam.skipped_near_kink += 1;
                    continue;
                }
                let grad = match fault {
                    Fault::None => losses::batch_loss_gradient(
                        &inst.logits, &inst.targets, &inst.config, inst.r, inst.maxlen,
                    ),
                    Fault::EntropySign => losses::batch_loss_gradient_entropy_sign_flipped(
                        &inst.logits, &inst.targets, &inst.config, inst.r, inst.maxlen,
                    ),
                };
                let grad = match grad {
                    Ok(g) => g,
                    Err(_) => {
                        fam.record(f64::INFINITY);
                        continue;
                    }
                };
                let f = |logits: &[Vec<f64>]| {
                    losses::batch_loss(logits, &inst.targets, &inst.config, inst.r, inst.maxlen)
                        .map(|b| b.total)
                        .unwrap_or(f64::NAN)
                };
                let mut work = inst.logits.clone();
                let mut analytic = Vec::new();
                let mut numeric = Vec::new();
                for i in 0..work.len() {
                    for j in 0..work[i].len() {
                        let orig = work[i][j];
                        work[i][j] = orig + LOSS_STEP;
                        let up = f(&work);
                        work[i][j] = orig - LOSS_STEP;
                        let down = f(&work);
                        work[i][j] = orig;
                        numeric.push((up - down) / (2.0 * LOSS_STEP));
                        analytic.push(grad[i][j]);
                    }
                }
                fam.record(relative_error(&analytic, &numeric, 1e-8));
            }
            fam
        })
        .collect()
}

fn encoder_family(name: &str) -> &'static str {
    if name.starts_with("embeddings.norm") || name.contains(".norm.") {
        "encoder/layer_norm"
    } else if name.starts_with("embeddings.") {
        "encoder/embeddings"
    } else if name.contains(".attn.") {
        "encoder/attention"
    } else if name.contains(".ffn.") {
        "encoder/ffn"
    } else {
        "encoder/head"
    }
}

/// Encoder gradients in double precision, dropout off, through the CP loss on
/// a random 2 x 8 batch with one padded row. At most `samples_per_tensor`
/// coordinates of each tensor are perturbed (all of them when `None`).
pub fn check_encoder(
    config: &ModelConfig,
    seed: u64,
    samples_per_tensor: Option<usize>,
) -> Result<Vec<FamilyResult>, encoder::EncoderError> {
    let config = ModelConfig {
        dropout_p: 0.0,
        seed,
        ..config.clone()
    };
    let mut params = ModelParams::<f64>::init(&config)?;
    let mut rng = rng::stream(seed, Stream::Eval, 7);
    // move every tensor off its special initial values
    for (_, _, t) in params.tensors_mut() {
        for x in t.data.iter_mut() {
            *x += rng.random_range(-0.2..0.2);
        }
    }
    let (batch, seq) = (2usize, 8usize.min(config.maxlen));
    let lens = [seq, seq.saturating_sub(3).max(1)];
    let low = if config.vocab_size > 5 { 5 } else { 0 };
    let mut ids = Vec::new();
    let mut pad_mask = Vec::new();
    for &len in &lens {
        for s in 0..seq {
            ids.push(if s < len { rng.random_range(low..config.vocab_size as u32) } else { 0 });
            pad_mask.push(s < len);
        }
    }
    let rows: Vec<usize> = (0..batch * seq)
        .filter(|&i| pad_mask[i] && i % 3 != 1)
        .collect();
    let targets: Vec<usize> = rows
        .iter()
        .map(|_| rng.random_range(0..config.vocab_size))
        .collect();
    let reg = RegularizerConfig::with_mode(LossMode::Cp);
    let r = *lens.iter().max().unwrap() as f64 / config.maxlen as f64;
    let input = EncoderInput {
        ids: &ids,
        pad_mask: &pad_mask,
        batch,
        seq_len: seq,
    };
    let v = config.vocab_size;
    let loss = |p: &ModelParams<f64>| -> f64 {
        let (logits, _) = encoder::forward_masked(p, &input, &rows, None).expect("validated input");
        let rows_ref: Vec<&[f64]> = logits.chunks(v).collect();
        losses::batch_loss(&rows_ref, &targets, &reg, r, config.maxlen)
            .map(|b| b.total)
            .unwrap_or(f64::NAN)
    };

    let (logits, cache) = encoder::forward_masked(&params, &input, &rows, None)?;
    let rows_ref: Vec<&[f64]> = logits.chunks(v).collect();
    let dl = losses::batch_loss_gradient(&rows_ref, &targets, &reg, r, config.maxlen)
        .map_err(|e| encoder::EncoderError::InvalidInput(e.to_string()))?;
    let dl: Vec<f64> = dl.into_iter().flatten().collect();
    let grads = encoder::backward(&params, &cache, &dl)?;

    let mut families: Vec<FamilyResult> = Vec::new();
    let count = params.tensors().len();
    for ti in 0..count {
        let (name, len) = {
            let t = &params.tensors()[ti];
            (t.0.clone(), t.2.len())
        };
        let picks: Vec<usize> = match samples_per_tensor {
            Some(k) if k < len => {
                let mut s = index::sample(&mut rng, len, k).into_vec();
                s.sort_unstable();
                s
            }
            _ => (0..len).collect(),
        };
        let analytic: Vec<f64> = picks.iter().map(|&i| grads.tensors()[ti].2.data[i]).collect();
        let mut numeric = Vec::with_capacity(picks.len());
        for &i in &picks {
            let orig = params.tensors()[ti].2.data[i];
            params.tensors_mut()[ti].2.data[i] = orig + ENCODER_STEP;
            let up = loss(&params);
            params.tensors_mut()[ti].2.data[i] = orig - ENCODER_STEP;
            let down = loss(&params);
            params.tensors_mut()[ti].2.data[i] = orig;
            numeric.push((up - down) / (2.0 * ENCODER_STEP));
        }
        let family = encoder_family(&name);
        let err = relative_error(&analytic, &numeric, 1e-6);
        match families.iter_mut().find(|f| f.family == family) {
            Some(f) => f.record(err),
            None => {
                let mut f = FamilyResult::new(family.to_string(), ENCODER_TOLERANCE);
                f.record(err);
                families.push(f);
            }
        }
    }
    Ok(families)
}
