//! BERT-style post-norm transformer encoder with a tied masked-LM head and
//! hand-written reverse-mode gradients.
//!
//! Layout conventions: activations are row-major `(batch * seq_len) x hidden`;
//! linear weights are stored `in x out` so a layer computes `x W + b`.

mod backward;
mod forward;
mod ops;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::RngExt;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::Real;
use crate::rng::{self, Stream};

pub use backward::backward;
pub use forward::{forward, forward_masked, EncoderInput, ForwardCache, Logits};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    /// Maximum input length in tokens; also the denominator of the length ratio.
    pub maxlen: usize,
    pub vocab_size: usize,
    pub dropout_p: f64,
    pub layernorm_eps: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// 64 hidden, 2 layers, 2 heads, 256 FFN, maxlen 128: desk-scale experiments.
    pub fn nano(vocab_size: usize) -> Self {
        Self {
            hidden_size: 64,
            num_layers: 2,
            num_heads: 2,
            ffn_size: 256,
            maxlen: 128,
            vocab_size,
            dropout_p: 0.1,
            layernorm_eps: 1e-12,
            seed: 42,
        }
    }

    /// BERT-mini shape: 256 hidden, 4 layers, 4 heads, 1024 FFN, maxlen 512.
    pub fn mini(vocab_size: usize) -> Self {
        Self {
            hidden_size: 256,
            num_layers: 4,
            num_heads: 4,
            ffn_size: 1024,
            maxlen: 512,
            ..Self::nano(vocab_size)
        }
    }

    /// BERT-base shape: 768 hidden, 12 layers, 12 heads, 3072 FFN, maxlen 512.
    pub fn base(vocab_size: usize) -> Self {
        Self {
            hidden_size: 768,
            num_layers: 12,
            num_heads: 12,
            ffn_size: 3072,
            maxlen: 512,
            ..Self::nano(vocab_size)
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Option<Self> {
        match name {
            "nano" => Some(Self::nano(vocab_size)),
            "mini" => Some(Self::mini(vocab_size)),
            "base" => Some(Self::base(vocab_size)),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("maxlen", self.maxlen),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(EncoderError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(EncoderError::InvalidConfig(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if !(self.layernorm_eps > 0.0) {
            return Err(EncoderError::InvalidConfig("layernorm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count:
    ///
    /// ```text
    /// V*H + maxlen*H + 2H                                  embeddings + norm
    /// + L * (4(H*H + H) + 2H + (H*F + F) + (F*H + H) + 2H)  encoder layers
    /// + (H*H + H) + 2H + V                                 head transform, norm, output bias
    /// ```
    pub fn param_count(&self) -> usize {
        let (v, h, f, l) = (self.vocab_size, self.hidden_size, self.ffn_size, self.num_layers);
        let layer = 4 * (h * h + h) + 2 * h + (h * f + f) + (f * h + h) + 2 * h;
        v * h + self.maxlen * h + 2 * h + l * layer + (h * h + h) + 2 * h + v
    }
}

/// Role of a parameter tensor; weight decay applies to `Matrix` only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Matrix,
    Bias,
    Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::ZERO; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in x out`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    fn zeros(inp: usize, out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inp, out]),
            bias: Tensor::zeros(&[out]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> LayerNorm<T> {
    fn identity(dim: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[dim], T::ONE),
            beta: Tensor::zeros(&[dim]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub attn_out: Linear<T>,
    pub attn_norm: LayerNorm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ffn_norm: LayerNorm<T>,
}

impl<T: Real> EncoderLayer<T> {
    fn zeros(h: usize, f: usize) -> Self {
        Self {
            query: Linear::zeros(h, h),
            key: Linear::zeros(h, h),
            value: Linear::zeros(h, h),
            attn_out: Linear::zeros(h, h),
            attn_norm: LayerNorm::identity(h),
            ffn_in: Linear::zeros(h, f),
            ffn_out: Linear::zeros(f, h),
            ffn_norm: LayerNorm::identity(h),
        }
    }
}

static VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Every trainable tensor of the encoder and its masked-LM head.
///
/// The head's output projection is the transpose of `word_embeddings`; only
/// the output bias is separate. Gradients are returned in this same type.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub word_embeddings: Tensor<T>,
    pub position_embeddings: Tensor<T>,
    pub embed_norm: LayerNorm<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub head_transform: Linear<T>,
    pub head_norm: LayerNorm<T>,
    pub head_bias: Tensor<T>,
    /// Separate output projection; only set by tests that sever the tie.
    untied_output: Option<Tensor<T>>,
    version: u64,
}

impl<T: Real> PartialEq for ModelParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.untied_output == other.untied_output
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|((_, _, a), (_, _, b))| *a == b)
    }
}

macro_rules! named_tensors {
    ($self:ident, $iter:ident, $($r:tt)+) => {{
        let mut out = Vec::with_capacity(8 + 16 * $self.layers.len());
        out.push(("embeddings.word".to_string(), ParamKind::Matrix, $($r)+ $self.word_embeddings));
        out.push(("embeddings.position".to_string(), ParamKind::Matrix, $($r)+ $self.position_embeddings));
        out.push(("embeddings.norm.gamma".to_string(), ParamKind::Norm, $($r)+ $self.embed_norm.gamma));
        out.push(("embeddings.norm.beta".to_string(), ParamKind::Norm, $($r)+ $self.embed_norm.beta));
        for (i, layer) in $self.layers.$iter().enumerate() {
            let p = format!("layer.{i}");
            out.push((format!("{p}.attn.query.weight"), ParamKind::Matrix, $($r)+ layer.query.weight));
            out.push((format!("{p}.attn.query.bias"), ParamKind::Bias, $($r)+ layer.query.bias));
            out.push((format!("{p}.attn.key.weight"), ParamKind::Matrix, $($r)+ layer.key.weight));
            out.push((format!("{p}.attn.key.bias"), ParamKind::Bias, $($r)+ layer.key.bias));
            out.push((format!("{p}.attn.value.weight"), ParamKind::Matrix, $($r)+ layer.value.weight));
            out.push((format!("{p}.attn.value.bias"), ParamKind::Bias, $($r)+ layer.value.bias));
            out.push((format!("{p}.attn.out.weight"), ParamKind::Matrix, $($r)+ layer.attn_out.weight));
            out.push((format!("{p}.attn.out.bias"), ParamKind::Bias, $($r)+ layer.attn_out.bias));
            out.push((format!("{p}.attn.norm.gamma"), ParamKind::Norm, $($r)+ layer.attn_norm.gamma));
            out.push((format!("{p}.attn.norm.beta"), ParamKind::Norm, $($r)+ layer.attn_norm.beta));
            out.push((format!("{p}.ffn.in.weight"), ParamKind::Matrix, $($r)+ layer.ffn_in.weight));
            out.push((format!("{p}.ffn.in.bias"), ParamKind::Bias, $($r)+ layer.ffn_in.bias));
            out.push((format!("{p}.ffn.out.weight"), ParamKind::Matrix, $($r)+ layer.ffn_out.weight));
            out.push((format!("{p}.ffn.out.bias"), ParamKind::Bias, $($r)+ layer.ffn_out.bias));
            out.push((format!("{p}.ffn.norm.gamma"), ParamKind::Norm, $($r)+ layer.ffn_norm.gamma));
            out.push((format!("{p}.ffn.norm.beta"), ParamKind::Norm, $($r)+ layer.ffn_norm.beta));
        }
        out.push(("head.transform.weight".to_string(), ParamKind::Matrix, $($r)+ $self.head_transform.weight));
        out.push(("head.transform.bias".to_string(), ParamKind::Bias, $($r)+ $self.head_transform.bias));
        out.push(("head.norm.gamma".to_string(), ParamKind::Norm, $($r)+ $self.head_norm.gamma));
        out.push(("head.norm.beta".to_string(), ParamKind::Norm, $($r)+ $self.head_norm.beta));
        out.push(("head.output.bias".to_string(), ParamKind::Bias, $($r)+ $self.head_bias));
        out
    }};
}

impl<T: Real> ModelParams<T> {
    /// Zero-valued tensors with the shapes `config` implies (layer-norm scales are 1).
    pub fn zeros(config: &ModelConfig) -> Self {
        let (v, h, f) = (config.vocab_size, config.hidden_size, config.ffn_size);
        Self {
            config: config.clone(),
            word_embeddings: Tensor::zeros(&[v, h]),
            position_embeddings: Tensor::zeros(&[config.maxlen, h]),
            embed_norm: LayerNorm::identity(h),
            layers: (0..config.num_layers).map(|_| EncoderLayer::zeros(h, f)).collect(),
            head_transform: Linear::zeros(h, h),
            head_norm: LayerNorm::identity(h),
            head_bias: Tensor::zeros(&[v]),
            untied_output: None,
            version: next_version(),
        }
    }

    /// All-zero tensors of the same shapes, for gradient accumulation.
    pub fn zeros_like(&self) -> Self {
        let mut g = Self::zeros(&self.config);
        for (_, _, t) in g.tensors_mut() {
            t.data.fill(T::ZERO);
        }
        g.untied_output = self.untied_output.as_ref().map(|t| Tensor::zeros(&t.shape));
        g
    }

    /// Truncated-normal (std 0.02, cut at two standard deviations) weight
    /// matrices; zero biases; unit layer-norm scales. Deterministic in `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut params = Self::zeros(config);
        let mut rng = rng::stream(config.seed, Stream::Init, 0);
        for (_, kind, tensor) in params.tensors_mut() {
            if kind != ParamKind::Matrix {
                continue;
            }
            for w in tensor.data.iter_mut() {
                let z = loop {
                    let z: f64 = rng.sample(StandardNormal);
                    if z.abs() <= 2.0 {
                        break z;
                    }
                };
                *w = T::from_f64(0.02 * z);
            }
        }
        Ok(params)
    }

    /// Tensors in canonical (checkpoint) order.
    pub fn tensors(&self) -> Vec<(String, ParamKind, &Tensor<T>)> {
        named_tensors!(self, iter, &)
    }

    /// Mutable tensors in canonical order. Invalidates outstanding forward caches.
    pub fn tensors_mut(&mut self) -> Vec<(String, ParamKind, &mut Tensor<T>)> {
        self.version = next_version();
        named_tensors!(self, iter_mut, &mut)
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, t)| t.data.iter().all(|x| x.is_finite()))
    }

    pub(crate) fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn output_projection(&self) -> &Tensor<T> {
        self.untied_output.as_ref().unwrap_or(&self.word_embeddings)
    }

    /// Element-wise conversion to another precision.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.config);
        for ((_, _, dst), (_, _, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d = U::from_f64(s.to_f64());
            }
        }
        out
    }
}
