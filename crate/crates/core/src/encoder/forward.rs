use super::ops::{self, NormCache};
use super::{EncoderError, ModelParams};
use crate::real::Real;
use crate::rng::StreamRng;

/// A padded `batch x seq_len` block of token ids; `pad_mask` is true at real tokens.
#[derive(Debug, Clone, Copy)]
pub struct EncoderInput<'a> {
    pub ids: &'a [u32],
    pub pad_mask: &'a [bool],
    pub batch: usize,
    pub seq_len: usize,
}

impl EncoderInput<'_> {
    fn validate(&self, vocab_size: usize, maxlen: usize) -> Result<(), EncoderError> {
        let n = self.batch * self.seq_len;
        if self.batch == 0 || self.seq_len == 0 {
            return Err(EncoderError::InvalidInput("empty batch".into()));
        }
        if self.ids.len() != n || self.pad_mask.len() != n {
            return Err(EncoderError::InvalidInput(format!(
                "expected {n} ids and mask entries, got {} and {}",
                self.ids.len(),
                self.pad_mask.len()
            )));
        }
        if self.seq_len > maxlen {
            return Err(EncoderError::InvalidInput(format!(
                "sequence length {} exceeds maxlen {maxlen}",
                self.seq_len
            )));
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(EncoderError::InvalidInput(format!(
                "token id {id} out of range for vocabulary of {vocab_size}"
            )));
        }
        for b in 0..self.batch {
            if !self.pad_mask[b * self.seq_len..(b + 1) * self.seq_len].iter().any(|&m| m) {
                return Err(EncoderError::InvalidInput(format!("row {b} has no real tokens")));
            }
        }
        Ok(())
    }
}

/// Dense `batch x seq_len x vocab` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub batch: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub data: Vec<T>,
}

impl<T> Logits<T> {
    pub fn at(&self, b: usize, s: usize) -> &[T] {
        let off = (b * self.seq_len + s) * self.vocab;
        &self.data[off..off + self.vocab]
    }
}

pub(crate) struct LayerCache<T> {
    pub x: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub probs: Vec<T>,
    pub ctx: Vec<T>,
    pub attn_drop: Option<Vec<T>>,
    pub h1: Vec<T>,
    pub ln1: NormCache<T>,
    pub f_pre: Vec<T>,
    pub f_act: Vec<T>,
    pub ffn_drop: Option<Vec<T>>,
    pub ln2: NormCache<T>,
}

/// Activations saved by [`forward_masked`] for [`super::backward`].
pub struct ForwardCache<T> {
    pub(crate) version: u64,
    pub(crate) batch: usize,
    pub(crate) seq_len: usize,
    pub(crate) ids: Vec<u32>,
    pub(crate) embed_ln: NormCache<T>,
    pub(crate) embed_drop: Option<Vec<T>>,
    pub(crate) layers: Vec<LayerCache<T>>,
    pub(crate) rows: Vec<usize>,
    pub(crate) head_in: Vec<T>,
    pub(crate) head_pre: Vec<T>,
    pub(crate) head_ln: NormCache<T>,
    pub(crate) head_out: Vec<T>,
}

impl<T> ForwardCache<T> {
    /// Flat `b * seq_len + s` indices of the rows whose logits were produced.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }
}

struct Encoded<T> {
    hidden: Vec<T>,
    embed_ln: NormCache<T>,
    embed_drop: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
}

fn attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    pad_mask: &[bool],
    batch: usize,
    seq: usize,
    hidden: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = hidden / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut probs = vec![T::ZERO; batch * heads * seq * seq];
    let mut ctx = vec![T::ZERO; batch * seq * hidden];
    let h = hidden as isize;
    for b in 0..batch {
        let mask = &pad_mask[b * seq..(b + 1) * seq];
        for a in 0..heads {
            let off = b * seq * hidden + a * dh;
            let p = &mut probs[(b * heads + a) * seq * seq..(b * heads + a + 1) * seq * seq];
            T::gemm_raw(
                seq, dh, seq, scale, &q[off..], h, 1, &k[off..], 1, h, T::ZERO, p, seq as isize, 1,
            );
            for row in p.chunks_mut(seq) {
                let mut max = None::<T>;
                for (j, &s) in row.iter().enumerate() {
                    if mask[j] && max.is_none_or(|m| s > m) {
                        max = Some(s);
                    }
                }
                let max = max.expect("validated: at least one real token");
                let mut sum = T::ZERO;
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if mask[j] { (*s - max).exp() } else { T::ZERO };
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
            }
            T::gemm_raw(
                seq, seq, dh, T::ONE, p, seq as isize, 1, &v[off..], h, 1, T::ZERO,
                &mut ctx[off..], h, 1,
            );
        }
    }
    (probs, ctx)
}

fn encode<T: Real>(
    params: &ModelParams<T>,
    input: &EncoderInput,
    mut dropout: Option<&mut StreamRng>,
) -> Encoded<T> {
    let cfg = &params.config;
    let (hd, seq) = (cfg.hidden_size, input.seq_len);
    let n = input.batch * seq;
    let eps = T::from_f64(cfg.layernorm_eps);
    let p = cfg.dropout_p;
    let mut drop_mask = |len: usize| -> Option<Vec<T>> {
        match dropout.as_deref_mut() {
            Some(rng) if p > 0.0 => Some(ops::dropout_mask(len, p, rng)),
            _ => None,
        }
    };

    let mut x0 = vec![T::ZERO; n * hd];
    for (i, row) in x0.chunks_mut(hd).enumerate() {
        let id = input.ids[i] as usize;
        let pos = i % seq;
        let w = &params.word_embeddings.data[id * hd..(id + 1) * hd];
        let pe = &params.position_embeddings.data[pos * hd..(pos + 1) * hd];
        for j in 0..hd {
            row[j] = w[j] + pe[j];
        }
    }
    let (mut x, embed_ln) = ops::layer_norm(&x0, hd, &params.embed_norm, eps);
    let embed_drop = drop_mask(n * hd);
    ops::apply_mask(&mut x, &embed_drop);

    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let q = ops::linear(&x, &layer.query);
        let k = ops::linear(&x, &layer.key);
        let v = ops::linear(&x, &layer.value);
        let (probs, ctx) = attention(&q, &k, &v, input.pad_mask, input.batch, seq, hd, cfg.num_heads);
        let mut ao = ops::linear(&ctx, &layer.attn_out);
        let attn_drop = drop_mask(n * hd);
        ops::apply_mask(&mut ao, &attn_drop);
        for (a, &xi) in ao.iter_mut().zip(&x) {
            *a += xi;
        }
        let (h1, ln1) = ops::layer_norm(&ao, hd, &layer.attn_norm, eps);
        let f_pre = ops::linear(&h1, &layer.ffn_in);
        let f_act: Vec<T> = f_pre.iter().map(|&z| ops::gelu(z)).collect();
        let mut fo = ops::linear(&f_act, &layer.ffn_out);
        let ffn_drop = drop_mask(n * hd);
        ops::apply_mask(&mut fo, &ffn_drop);
        for (f, &hi) in fo.iter_mut().zip(&h1) {
            *f += hi;
        }
        let (h2, ln2) = ops::layer_norm(&fo, hd, &layer.ffn_norm, eps);
        layers.push(LayerCache {
            x: std::mem::replace(&mut x, h2),
            q,
            k,
            v,
            probs,
            ctx,
            attn_drop,
            h1,
            ln1,
            f_pre,
            f_act,
            ffn_drop,
            ln2,
        });
    }
    Encoded {
        hidden: x,
        embed_ln,
        embed_drop,
        layers,
    }
}

struct Head<T> {
    logits: Vec<T>,
    head_in: Vec<T>,
    head_pre: Vec<T>,
    head_ln: NormCache<T>,
    head_out: Vec<T>,
}

fn head<T: Real>(params: &ModelParams<T>, hidden: &[T], rows: &[usize]) -> Head<T> {
    let cfg = &params.config;
    let (hd, v) = (cfg.hidden_size, cfg.vocab_size);
    let mut head_in = Vec::with_capacity(rows.len() * hd);
    for &r in rows {
        head_in.extend_from_slice(&hidden[r * hd..(r + 1) * hd]);
    }
    let head_pre = ops::linear(&head_in, &params.head_transform);
    let act: Vec<T> = head_pre.iter().map(|&z| ops::gelu(z)).collect();
    let (head_out, head_ln) =
        ops::layer_norm(&act, hd, &params.head_norm, T::from_f64(cfg.layernorm_eps));
    let mut logits = Vec::with_capacity(rows.len() * v);
    for _ in rows {
        logits.extend_from_slice(&params.head_bias.data);
    }
    T::gemm_raw(
        rows.len(), hd, v, T::ONE, &head_out, hd as isize, 1,
        &params.output_projection().data, 1, hd as isize, T::ONE, &mut logits, v as isize, 1,
    );
    Head {
        logits,
        head_in,
        head_pre,
        head_ln,
        head_out,
    }
}

/// Logits at every position.
///
/// `dropout` set means train mode: dropout masks are drawn from that stream.
/// `None` is eval mode and fully deterministic.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    input: &EncoderInput,
    dropout: Option<&mut StreamRng>,
) -> Result<Logits<T>, EncoderError> {
    let cfg = &params.config;
    input.validate(cfg.vocab_size, cfg.maxlen)?;
    let enc = encode(params, input, dropout);
    let rows: Vec<usize> = (0..input.batch * input.seq_len).collect();
    let h = head(params, &enc.hidden, &rows);
    Ok(Logits {
        batch: input.batch,
        seq_len: input.seq_len,
        vocab: cfg.vocab_size,
        data: h.logits,
    })
}

/// Logits only at the flat positions in `rows` (`rows.len() x vocab`), plus the
/// cache needed to backpropagate a loss defined on them.
pub fn forward_masked<T: Real>(
    params: &ModelParams<T>,
    input: &EncoderInput,
    rows: &[usize],
    dropout: Option<&mut StreamRng>,
) -> Result<(Vec<T>, ForwardCache<T>), EncoderError> {
    let cfg = &params.config;
    input.validate(cfg.vocab_size, cfg.maxlen)?;
    let n = input.batch * input.seq_len;
    if let Some(&r) = rows.iter().find(|&&r| r >= n) {
        return Err(EncoderError::InvalidInput(format!("row {r} outside batch of {n} positions")));
    }
    let enc = encode(params, input, dropout);
    let h = head(params, &enc.hidden, rows);
    let cache = ForwardCache {
        version: params.version(),
        batch: input.batch,
        seq_len: input.seq_len,
        ids: input.ids.to_vec(),
        embed_ln: enc.embed_ln,
        embed_drop: enc.embed_drop,
        layers: enc.layers,
        rows: rows.to_vec(),
        head_in: h.head_in,
        head_pre: h.head_pre,
        head_ln: h.head_ln,
        head_out: h.head_out,
    };
    Ok((h.logits, cache))
}
