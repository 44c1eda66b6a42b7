//! Pre-training loop: AdamW with linear warmup and decay, length-grouped
//! batches, dynamic masking and the regularized objective.

mod optim;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use optim::{adamw_step, adamw_update, clip_global_norm, global_norm, AdamW, OptimState};

use crate::corpus::{mask_batch, CorpusError, Dataset, EpochBatcher, MaskedBatch, MaskingPolicy};
use crate::encoder::{self, EncoderError, EncoderInput, ModelConfig, ModelParams};
use crate::losses::{self, LossBreakdown, LossError, LossMode, RegularizerConfig};
use crate::rng::{self, Stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value at step {step}: {reason}")]
    NonFinite {
        step: u64,
        reason: String,
        /// JSON description of the offending batch.
        dump: String,
    },
    #[error("checkpoint write failed: {0}")]
    Checkpoint(String),
    #[error("log write failed: {0}")]
    Log(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    pub seed: u64,
    pub regularizer: RegularizerConfig,
    pub masking: MaskingPolicy,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::nano()
    }
}

impl TrainConfig {
    pub fn nano() -> Self {
        Self {
            total_steps: 2_000,
            warmup_steps: 100,
            peak_lr: 1e-3,
            batch_size: 32,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_grad_norm: 1.0,
            seed: 42,
            regularizer: RegularizerConfig::default(),
            masking: MaskingPolicy::default(),
            log_every: 10,
            checkpoint_every: 500,
        }
    }

    pub fn mini() -> Self {
        Self {
            total_steps: 150_000,
            warmup_steps: 1_500,
            peak_lr: 5e-4,
            batch_size: 576,
            log_every: 100,
            checkpoint_every: 10_000,
            ..Self::nano()
        }
    }

    pub fn base() -> Self {
        Self {
            total_steps: 250_000,
            warmup_steps: 2_500,
            peak_lr: 2e-4,
            batch_size: 512,
            log_every: 100,
            checkpoint_every: 10_000,
            ..Self::nano()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "nano" => Some(Self::nano()),
            "mini" => Some(Self::mini()),
            "base" => Some(Self::base()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return bad("peak_lr must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.max_grad_norm >= 0.0) {
            return bad("weight_decay and max_grad_norm must be non-negative".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return bad("log_every and checkpoint_every must be positive".into());
        }
        let m = &self.masking;
        if !(m.select_prob > 0.0 && m.select_prob <= 1.0)
            || m.mask_prob < 0.0
            || m.random_prob < 0.0
            || m.mask_prob + m.random_prob > 1.0
        {
            return bad("masking probabilities out of range".into());
        }
        // an unset cp-avg-l length is filled from the dataset by `train`
        let mut reg = self.regularizer;
        if reg.mode == LossMode::CpAvgL && reg.avg_len.is_none() {
            reg.avg_len = Some(1.0);
        }
        reg.validate()?;
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at_step(step: u64, config: &TrainConfig) -> Result<f64, TrainError> {
    if step > config.total_steps {
        return Err(TrainError::InvalidConfig(format!(
            "step {step} beyond total_steps {}",
            config.total_steps
        )));
    }
    let (w, t) = (config.warmup_steps, config.total_steps);
    if step < w {
        Ok(config.peak_lr * step as f64 / w as f64)
    } else if t == w {
        Ok(config.peak_lr)
    } else {
        Ok(config.peak_lr * (t - step) as f64 / (t - w) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub total: f64,
    pub ce_term: f64,
    pub penalty_term: f64,
    pub entropy_mean: f64,
    pub ratio_r: f64,
    pub hinge_active_fraction: f64,
    pub masked_tokens: usize,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Receives log records and checkpoint opportunities as training proceeds.
pub trait TrainObserver {
    fn on_record(&mut self, _record: &TrainLogRecord) -> Result<(), TrainError> {
        Ok(())
    }

    /// Called every `checkpoint_every` steps and once after the last step.
    fn on_checkpoint(
        &mut self,
        _steps_done: u64,
        _params: &ModelParams<f32>,
        _optim: &OptimState<f32>,
        _regularizer: &RegularizerConfig,
    ) -> Result<(), TrainError> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub optim: OptimState<f32>,
    /// The regularizer actually used, with `avg_len` resolved for CP-AvgL.
    pub regularizer: RegularizerConfig,
    /// Loss breakdown of every step, in order.
    pub losses: Vec<LossBreakdown>,
    pub records: Vec<TrainLogRecord>,
}

impl TrainOutcome {
    pub fn final_breakdown(&self) -> &LossBreakdown {
        self.losses.last().expect("at least one step")
    }

    /// Mean total loss over steps `range`.
    pub fn mean_total(&self, range: std::ops::Range<usize>) -> f64 {
        let n = range.len() as f64;
        self.losses[range].iter().map(|l| l.total).sum::<f64>() / n
    }
}

#[derive(Serialize)]
struct BatchDump<'a> {
    step: u64,
    reason: &'a str,
    seq_len: usize,
    ids: &'a [u32],
    true_lengths: &'a [usize],
    masked_positions: Vec<usize>,
    labels: Vec<usize>,
    ratio_r: f64,
    breakdown: Option<&'a LossBreakdown>,
}

fn non_finite(step: u64, reason: &str, batch: &MaskedBatch, breakdown: Option<&LossBreakdown>) -> TrainError {
    let dump = BatchDump {
        step,
        reason,
        seq_len: batch.seq_len,
        ids: &batch.ids,
        true_lengths: &batch.true_lengths,
        masked_positions: batch.target_rows(),
        labels: batch.labels(),
        ratio_r: batch.ratio_r,
        breakdown,
    };
    TrainError::NonFinite {
        step,
        reason: reason.to_string(),
        dump: serde_json::to_string_pretty(&dump).unwrap_or_default(),
    }
}

/// Resolves CP-AvgL's dataset average length if the config leaves it unset.
pub fn resolve_regularizer(reg: &RegularizerConfig, data: &Dataset) -> RegularizerConfig {
    let mut reg = *reg;
    if reg.mode == LossMode::CpAvgL && reg.avg_len.is_none() {
        reg.avg_len = data.mean_length();
    }
    reg
}

/// Trains from freshly initialized parameters.
pub fn train(
    model: &ModelConfig,
    config: &TrainConfig,
    data: &Dataset,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    model.validate()?;
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::Corpus(CorpusError::EmptyCorpus));
    }
    if data.maxlen > model.maxlen {
        return Err(TrainError::InvalidConfig(format!(
            "dataset maxlen {} exceeds model maxlen {}",
            data.maxlen, model.maxlen
        )));
    }
    let reg = resolve_regularizer(&config.regularizer, data);
    reg.validate()?;
    if let Some(avg) = reg.avg_len.filter(|_| reg.mode == LossMode::CpAvgL) {
        log::info!("cp-avg-l average length {avg:.3} tokens");
    }

    let mut params = ModelParams::<f32>::init(model)?;
    let mut optim = OptimState::new(&params);
    let mut batcher = EpochBatcher::new(data.lengths(), config.batch_size, config.seed);
    let vocab = model.vocab_size;
    let mut losses = Vec::with_capacity(config.total_steps as usize);
    let mut records = Vec::new();
    let clock = Instant::now();

    for step in 0..config.total_steps {
        let epoch = batcher.epoch();
        let chunk = batcher.next_chunk();
        let seqs: Vec<_> = chunk.iter().map(|&i| &data.sequences[i]).collect();
        let mut mrng = rng::stream(config.seed, Stream::Masking, step);
        let batch = mask_batch(&seqs, vocab, model.maxlen, &config.masking, &mut mrng)?;
        let rows = batch.target_rows();
        let labels = batch.labels();
        let input = EncoderInput {
            ids: &batch.ids,
            pad_mask: &batch.pad_mask,
            batch: batch.batch_size,
            seq_len: batch.seq_len,
        };
        let mut drng = rng::stream(config.seed, Stream::Dropout, step);
        let (logits, cache) = encoder::forward_masked(&params, &input, &rows, Some(&mut drng))?;
        let logits64: Vec<f64> = logits.iter().map(|&x| x as f64).collect();
        if logits64.iter().any(|x| !x.is_finite()) {
            return Err(non_finite(step, "non-finite logits", &batch, None));
        }
        let row_refs: Vec<&[f64]> = logits64.chunks(vocab).collect();
        let lg = losses::batch_loss_with_gradient(&row_refs, &labels, &reg, batch.ratio_r, model.maxlen)?;
        if !lg.breakdown.total.is_finite() {
            return Err(non_finite(step, "non-finite loss", &batch, Some(&lg.breakdown)));
        }
        let dlogits: Vec<f32> = lg.grads.iter().flatten().map(|&g| g as f32).collect();
        let mut grads = encoder::backward(&params, &cache, &dlogits)?;
        let grad_norm = if config.max_grad_norm > 0.0 {
            clip_global_norm(&mut grads, config.max_grad_norm)
        } else {
            global_norm(&grads)
        };
        if !grad_norm.is_finite() {
            return Err(non_finite(step, "non-finite gradient", &batch, Some(&lg.breakdown)));
        }
        let lr = lr_at_step(step, config)?;
        let hp = AdamW {
            lr,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
        };
        adamw_step(&mut params, &grads, &mut optim, &hp)?;
        if !params.all_finite() {
            return Err(non_finite(step, "non-finite parameters after update", &batch, Some(&lg.breakdown)));
        }

        if step % config.log_every == 0 || step + 1 == config.total_steps {
            let b = &lg.breakdown;
            let record = TrainLogRecord {
                step,
                epoch,
                lr,
                total: b.total,
                ce_term: b.ce_term,
                penalty_term: b.penalty_term,
                entropy_mean: b.entropy_mean,
                ratio_r: b.ratio_r,
                hinge_active_fraction: b.hinge_active_fraction,
                masked_tokens: rows.len(),
                grad_norm,
                wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            };
            log::debug!("step {step} loss {:.4} lr {lr:.2e}", b.total);
            observer.on_record(&record)?;
            records.push(record);
        }
        losses.push(lg.breakdown);
        let done = step + 1;
        if done % config.checkpoint_every == 0 || done == config.total_steps {
            observer.on_checkpoint(done, &params, &optim, &reg)?;
        }
    }
    Ok(TrainOutcome {
        params,
        optim,
        regularizer: reg,
        losses,
        records,
    })
}
