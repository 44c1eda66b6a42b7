//! Probability utilities and the confidence-regularized masked-LM objectives.
//!
//! Every loss is expressed in nats and averaged uniformly over masked positions.
//! The length-adaptive modes take a single batch-level length ratio `r`, the
//! longest true sequence length in the batch divided by the model's maximum
//! input length.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("index {index} out of range for vocabulary of size {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// A normalized distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    probs: Vec<f64>,
}

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self, LossError> {
        if probs.is_empty() {
            return Err(LossError::InvalidInput("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(LossError::InvalidInput(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(LossError::InvalidInput(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    /// The uniform reference distribution over `v` outcomes.
    pub fn uniform(v: usize) -> Self {
        assert!(v > 0, "uniform distribution needs at least one outcome");
        Self {
            probs: vec![1.0 / v as f64; v],
        }
    }

    pub fn one_hot(v: usize, index: usize) -> Self {
        assert!(index < v);
        let mut probs = vec![0.0; v];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index and value of the most probable outcome (first one on ties).
    pub fn argmax(&self) -> (usize, f64) {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn check_finite(logits: &[f64]) -> Result<(), LossError> {
    if logits.is_empty() {
        return Err(LossError::InvalidInput("empty logits".into()));
    }
    if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
        return Err(LossError::InvalidInput(format!(
            "non-finite logit {} at index {i}",
            logits[i]
        )));
    }
    Ok(())
}

/// Numerically stable log-softmax. Every output entry is `<= 0`.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>, LossError> {
    check_finite(logits)?;
    Ok(log_softmax_unchecked(logits))
}

fn log_softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let log_norm = sum.ln();
    logits.iter().map(|z| (z - max) - log_norm).collect()
}

pub fn softmax(logits: &[f64]) -> Result<ProbDist, LossError> {
    check_finite(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(ProbDist {
        probs: exps.into_iter().map(|e| e / sum).collect(),
    })
}

/// `H(y, p) = -ln p[target]` for a hard label.
pub fn cross_entropy(dist: &ProbDist, target: usize) -> Result<f64, LossError> {
    let p = *dist.probs.get(target).ok_or(LossError::IndexOutOfRange {
        index: target,
        len: dist.len(),
    })?;
    Ok(-p.ln())
}

/// Hard-label cross-entropy evaluated through log-softmax of the logits.
pub fn cross_entropy_from_logits(logits: &[f64], target: usize) -> Result<f64, LossError> {
    if target >= logits.len() {
        return Err(LossError::IndexOutOfRange {
            index: target,
            len: logits.len(),
        });
    }
    Ok(-log_softmax(logits)?[target])
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(dist: &ProbDist) -> f64 {
    dist.probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// `D_KL(p || q)`; fails when `q` vanishes somewhere `p` does not.
pub fn kl_divergence(p: &ProbDist, q: &ProbDist) -> Result<f64, LossError> {
    if p.len() != q.len() {
        return Err(LossError::InvalidInput(format!(
            "support sizes differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(LossError::Domain(format!(
                "q has zero mass at index {i} where p = {pi}"
            )));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl)
}

/// `H(u, p)`: cross-entropy from the uniform distribution, i.e. the mean of `-ln p`.
pub fn uniform_cross_entropy(dist: &ProbDist) -> Result<f64, LossError> {
    if dist.probs.iter().any(|&p| p == 0.0) {
        return Err(LossError::Domain(
            "uniform cross-entropy is infinite for a distribution with zeros".into(),
        ));
    }
    let v = dist.len() as f64;
    Ok(-dist.probs.iter().map(|p| p.ln()).sum::<f64>() / v)
}

/// Max-pooled length ratio of a batch: `max(true_lengths) / maxlen`.
pub fn length_ratio(true_lengths: &[usize], maxlen: usize) -> Result<f64, LossError> {
    if maxlen == 0 {
        return Err(LossError::InvalidBatch("maxlen must be positive".into()));
    }
    let pooled = *true_lengths
        .iter()
        .max()
        .ok_or_else(|| LossError::InvalidBatch("empty batch".into()))?;
    if true_lengths.contains(&0) {
        return Err(LossError::InvalidBatch("zero-length sequence".into()));
    }
    if pooled > maxlen {
        return Err(LossError::InvalidBatch(format!(
            "sequence length {pooled} exceeds maxlen {maxlen}"
        )));
    }
    Ok(pooled as f64 / maxlen as f64)
}

fn check_unit(name: &str, x: f64) -> Result<(), LossError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(LossError::InvalidArgument(format!(
            "{name} = {x} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Hinge term of the length-adaptive confidence penalty: `max(0, beta (1 - r) - H(p))`.
pub fn cp_l_penalty(dist: &ProbDist, beta: f64, r: f64) -> Result<f64, LossError> {
    check_unit("r", r)?;
    if !(beta >= 0.0) {
        return Err(LossError::InvalidArgument(format!("beta = {beta} < 0")));
    }
    Ok(hinge(beta * (1.0 - r), entropy(dist)))
}

#[inline]
fn hinge(threshold: f64, h: f64) -> f64 {
    let gap = threshold - h;
    if gap > 0.0 {
        gap
    } else {
        0.0
    }
}

/// Smoothing weight of length-adaptive label smoothing: `T (1 - r)^2`.
pub fn ls_l_alpha(t: f64, r: f64) -> Result<f64, LossError> {
    check_unit("r", r)?;
    check_unit("T", t)?;
    Ok(t * (1.0 - r) * (1.0 - r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "mlm")]
    Mlm,
    #[serde(rename = "ls")]
    Ls,
    #[serde(rename = "cp")]
    Cp,
    #[serde(rename = "cp-l")]
    CpL,
    #[serde(rename = "cp-avg-l")]
    CpAvgL,
    #[serde(rename = "ls-l")]
    LsL,
}

impl LossMode {
    pub const ALL: [LossMode; 6] = [
        LossMode::Mlm,
        LossMode::Ls,
        LossMode::Cp,
        LossMode::CpL,
        LossMode::CpAvgL,
        LossMode::LsL,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Mlm => "mlm",
            LossMode::Ls => "ls",
            LossMode::Cp => "cp",
            LossMode::CpL => "cp-l",
            LossMode::CpAvgL => "cp-avg-l",
            LossMode::LsL => "ls-l",
        }
    }

    pub fn has_hinge(self) -> bool {
        matches!(self, LossMode::CpL | LossMode::CpAvgL)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        LossMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| LossError::InvalidArgument(format!("unknown loss mode `{s}`")))
    }
}

/// Loss mode plus its hyperparameters.
///
/// Hyperparameters not used by the active mode are ignored but still validated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerConfig {
    pub mode: LossMode,
    /// Entropy weight (CP) or hinge scale (CP-L, CP-AvgL).
    pub beta: f64,
    /// Label smoothing weight (LS).
    pub alpha: f64,
    /// Maximum smoothing weight of LS-L.
    #[serde(rename = "T")]
    pub t: f64,
    /// Dataset mean tokenized length, used by CP-AvgL in place of the batch length.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_len: Option<f64>,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::Mlm,
            beta: 2.0,
            alpha: 0.1,
            t: 0.05,
            avg_len: None,
        }
    }
}

impl RegularizerConfig {
    pub fn with_mode(mode: LossMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(LossError::InvalidArgument(format!(
                "beta = {} must be finite and >= 0",
                self.beta
            )));
        }
        check_unit("alpha", self.alpha)?;
        check_unit("T", self.t)?;
        if let Some(avg) = self.avg_len {
            if !(avg > 0.0) || !avg.is_finite() {
                return Err(LossError::InvalidArgument(format!(
                    "avg_len = {avg} must be positive"
                )));
            }
        }
        if self.mode == LossMode::CpAvgL && self.avg_len.is_none() {
            return Err(LossError::InvalidArgument(
                "cp-avg-l requires avg_len".into(),
            ));
        }
        Ok(())
    }

    /// Length ratio actually used by the active mode for a batch with ratio `batch_r`.
    pub fn effective_ratio(&self, batch_r: f64, maxlen: usize) -> f64 {
        match (self.mode, self.avg_len) {
            (LossMode::CpAvgL, Some(avg)) => (avg / maxlen as f64).min(1.0),
            _ => batch_r,
        }
    }
}

/// Decomposition of a batch loss. All terms are means over masked positions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean hard-label cross-entropy.
    pub ce_term: f64,
    /// Mean of the mode-specific additive term, so `total ~= ce_term + penalty_term`.
    pub penalty_term: f64,
    /// Mean output entropy at masked positions.
    pub entropy_mean: f64,
    /// Length ratio used by the loss (after CP-AvgL substitution).
    pub ratio_r: f64,
    /// Fraction of masked positions whose hinge is active (0 for hinge-free modes).
    pub hinge_active_fraction: f64,
}

/// Loss value plus its gradient with respect to every logit row.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad {
    pub breakdown: LossBreakdown,
    pub grads: Vec<Vec<f64>>,
}

pub fn batch_loss<L: AsRef<[f64]>>(
    logits: &[L],
    targets: &[usize],
    config: &RegularizerConfig,
    r: f64,
    maxlen: usize,
) -> Result<LossBreakdown, LossError> {
    Ok(evaluate(logits, targets, config, r, maxlen, false, 1.0)?.breakdown)
}

pub fn batch_loss_gradient<L: AsRef<[f64]>>(
    logits: &[L],
    targets: &[usize],
    config: &RegularizerConfig,
    r: f64,
    maxlen: usize,
) -> Result<Vec<Vec<f64>>, LossError> {
    Ok(evaluate(logits, targets, config, r, maxlen, true, 1.0)?.grads)
}

/// Loss and gradient in one pass; the training loop uses this.
pub fn batch_loss_with_gradient<L: AsRef<[f64]>>(
    logits: &[L],
    targets: &[usize],
    config: &RegularizerConfig,
    r: f64,
    maxlen: usize,
) -> Result<LossWithGrad, LossError> {
    evaluate(logits, targets, config, r, maxlen, true, 1.0)
}

/// Gradient with the entropy term's sign flipped. Exists only so the gradient
/// checker can prove it catches a broken entropy gradient.
#[doc(hidden)]
pub fn batch_loss_gradient_entropy_sign_flipped<L: AsRef<[f64]>>(
    logits: &[L],
    targets: &[usize],
    config: &RegularizerConfig,
    r: f64,
    maxlen: usize,
) -> Result<Vec<Vec<f64>>, LossError> {
    Ok(evaluate(logits, targets, config, r, maxlen, true, -1.0)?.grads)
}

fn evaluate<L: AsRef<[f64]>>(
    logits: &[L],
    targets: &[usize],
    config: &RegularizerConfig,
    r: f64,
    maxlen: usize,
    want_grad: bool,
    entropy_grad_sign: f64,
) -> Result<LossWithGrad, LossError> {
    if logits.is_empty() {
        return Err(LossError::InvalidBatch("no masked positions".into()));
    }
    if logits.len() != targets.len() {
        return Err(LossError::InvalidBatch(format!(
            "{} logit rows but {} targets",
            logits.len(),
            targets.len()
        )));
    }
    check_unit("r", r)?;
    config.validate()?;
    let r = config.effective_ratio(r, maxlen);
    let alpha = match config.mode {
        LossMode::Ls => config.alpha,
        LossMode::LsL => ls_l_alpha(config.t, r)?,
        _ => 0.0,
    };
    let threshold = config.beta * (1.0 - r);

    let n = logits.len();
    let inv_n = 1.0 / n as f64;
    let mut sum_total = 0.0;
    let mut sum_ce = 0.0;
    let mut sum_pen = 0.0;
    let mut sum_h = 0.0;
    let mut active = 0usize;
    let mut grads = Vec::with_capacity(if want_grad { n } else { 0 });

    for (row, &target) in logits.iter().zip(targets) {
        let z = row.as_ref();
        check_finite(z)?;
        let v = z.len();
        if target >= v {
            return Err(LossError::IndexOutOfRange { index: target, len: v });
        }
        let lsm = log_softmax_unchecked(z);
        let p: Vec<f64> = lsm.iter().map(|l| l.exp()).collect();
        let ce = -lsm[target];
        let h: f64 = -p.iter().zip(&lsm).map(|(pi, li)| pi * li).sum::<f64>();

        let (loss, pen, hinge_on) = match config.mode {
            LossMode::Mlm => (ce, 0.0, false),
            LossMode::Ls | LossMode::LsL => {
                let hu = -lsm.iter().sum::<f64>() / v as f64;
                let loss = (1.0 - alpha) * ce + alpha * hu;
                (loss, alpha * (hu - ce), false)
            }
            LossMode::Cp => (ce - config.beta * h, -config.beta * h, false),
            LossMode::CpL | LossMode::CpAvgL => {
                let pen = hinge(threshold, h);
                (ce + pen, pen, threshold - h > 0.0)
            }
        };
        sum_total += loss;
        sum_ce += ce;
        sum_pen += pen;
        sum_h += h;
        active += hinge_on as usize;

        if want_grad {
            // d ce / dz = p - e_target
            let mut g: Vec<f64> = p.clone();
            g[target] -= 1.0;
            match config.mode {
                LossMode::Mlm => {}
                LossMode::Ls | LossMode::LsL => {
                    // d H(u, p) / dz = p - u
                    let u = 1.0 / v as f64;
                    for (gj, pj) in g.iter_mut().zip(&p) {
                        *gj = (1.0 - alpha) * *gj + alpha * (pj - u);
                    }
                }
                LossMode::Cp => {
                    let w = config.beta * entropy_grad_sign;
                    for ((gj, pj), lj) in g.iter_mut().zip(&p).zip(&lsm) {
                        // d H / dz_j = -p_j (ln p_j + H)
                        *gj += w * pj * (lj + h);
                    }
                }
                LossMode::CpL | LossMode::CpAvgL => {
                    if hinge_on {
                        for ((gj, pj), lj) in g.iter_mut().zip(&p).zip(&lsm) {
                            *gj += entropy_grad_sign * pj * (lj + h);
                        }
                    }
                }
            }
            for gj in g.iter_mut() {
                *gj *= inv_n;
            }
            grads.push(g);
        }
    }

    let uses_hinge = config.mode.has_hinge();
    Ok(LossWithGrad {
        breakdown: LossBreakdown {
            total: sum_total * inv_n,
            ce_term: sum_ce * inv_n,
            penalty_term: sum_pen * inv_n,
            entropy_mean: sum_h * inv_n,
            ratio_r: r,
            hinge_active_fraction: if uses_hinge {
                active as f64 * inv_n
            } else {
                0.0
            },
        },
        grads,
    })
}
