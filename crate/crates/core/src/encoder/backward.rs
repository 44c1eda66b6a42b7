use super::forward::ForwardCache;
use super::ops;
use super::{EncoderError, ModelParams};
use crate::real::Real;

fn attention_backward<T: Real>(
    dctx: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    batch: usize,
    seq: usize,
    hidden: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = hidden / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let h = hidden as isize;
    let s = seq as isize;
    let mut dq = vec![T::ZERO; q.len()];
    let mut dk = vec![T::ZERO; k.len()];
    let mut dv = vec![T::ZERO; v.len()];
    let mut dp = vec![T::ZERO; seq * seq];
    for b in 0..batch {
        for a in 0..heads {
            let off = b * seq * hidden + a * dh;
            let p = &probs[(b * heads + a) * seq * seq..(b * heads + a + 1) * seq * seq];
            // dP = dctx V^T
            T::gemm_raw(
                seq, dh, seq, T::ONE, &dctx[off..], h, 1, &v[off..], 1, h, T::ZERO, &mut dp, s, 1,
            );
            // dV = P^T dctx
            T::gemm_raw(
                seq, seq, dh, T::ONE, p, 1, s, &dctx[off..], h, 1, T::ZERO, &mut dv[off..], h, 1,
            );
            // softmax backward, in place
            for (drow, prow) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                let dot: T = drow.iter().zip(prow).map(|(&d, &pp)| d * pp).sum();
                for (d, &pp) in drow.iter_mut().zip(prow) {
                    *d = pp * (*d - dot);
                }
            }
            T::gemm_raw(
                seq, seq, dh, scale, &dp, s, 1, &k[off..], h, 1, T::ZERO, &mut dq[off..], h, 1,
            );
            T::gemm_raw(
                seq, seq, dh, scale, &dp, 1, s, &q[off..], h, 1, T::ZERO, &mut dk[off..], h, 1,
            );
        }
    }
    (dq, dk, dv)
}

/// Reverse-mode gradients of a loss whose derivative with respect to the logits
/// of `cache.rows()` is `dlogits` (`rows x vocab`, row-major).
///
/// Fails if `params` changed since the forward pass that produced `cache`.
pub fn backward<T: Real>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    dlogits: &[T],
) -> Result<ModelParams<T>, EncoderError> {
    if cache.version != params.version() {
        return Err(EncoderError::Contract(
            "forward cache is stale: parameters changed after the forward pass".into(),
        ));
    }
    let cfg = &params.config;
    let (hd, v) = (cfg.hidden_size, cfg.vocab_size);
    let nrows = cache.rows.len();
    if dlogits.len() != nrows * v {
        return Err(EncoderError::Contract(format!(
            "upstream gradient has {} entries, expected {}",
            dlogits.len(),
            nrows * v
        )));
    }
    let mut g = params.zeros_like();
    let (batch, seq) = (cache.batch, cache.seq_len);
    let n = batch * seq;

    // Output layer: logits = head_out E^T + bias.
    for row in dlogits.chunks(v) {
        for (b, &d) in g.head_bias.data.iter_mut().zip(row) {
            *b += d;
        }
    }
    let out_grad = match g.untied_output.as_mut() {
        Some(t) => &mut t.data,
        None => &mut g.word_embeddings.data,
    };
    T::gemm_raw(
        v, nrows, hd, T::ONE, dlogits, 1, v as isize, &cache.head_out, hd as isize, 1, T::ONE,
        out_grad, hd as isize, 1,
    );
    let mut d_out = vec![T::ZERO; nrows * hd];
    T::gemm_raw(
        nrows, v, hd, T::ONE, dlogits, v as isize, 1, &params.output_projection().data,
        hd as isize, 1, T::ZERO, &mut d_out, hd as isize, 1,
    );
    let mut d_act = ops::layer_norm_backward(&d_out, hd, &cache.head_ln, &params.head_norm, &mut g.head_norm);
    for (d, &z) in d_act.iter_mut().zip(&cache.head_pre) {
        *d *= ops::gelu_grad(z);
    }
    let d_in = ops::linear_backward(&cache.head_in, &d_act, &params.head_transform, &mut g.head_transform);

    let mut dx = vec![T::ZERO; n * hd];
    for (i, &r) in cache.rows.iter().enumerate() {
        for j in 0..hd {
            dx[r * hd + j] += d_in[i * hd + j];
        }
    }

    for (li, lc) in cache.layers.iter().enumerate().rev() {
        let layer = &params.layers[li];
        let lg = &mut g.layers[li];
        let d_h2pre = ops::layer_norm_backward(&dx, hd, &lc.ln2, &layer.ffn_norm, &mut lg.ffn_norm);
        let mut d_fo = d_h2pre.clone();
        ops::apply_mask(&mut d_fo, &lc.ffn_drop);
        let mut d_fact = ops::linear_backward(&lc.f_act, &d_fo, &layer.ffn_out, &mut lg.ffn_out);
        for (d, &z) in d_fact.iter_mut().zip(&lc.f_pre) {
            *d *= ops::gelu_grad(z);
        }
        let mut d_h1 = ops::linear_backward(&lc.h1, &d_fact, &layer.ffn_in, &mut lg.ffn_in);
        for (d, &r) in d_h1.iter_mut().zip(&d_h2pre) {
            *d += r;
        }
        let d_h1pre = ops::layer_norm_backward(&d_h1, hd, &lc.ln1, &layer.attn_norm, &mut lg.attn_norm);
        let mut d_ao = d_h1pre.clone();
        ops::apply_mask(&mut d_ao, &lc.attn_drop);
        let d_ctx = ops::linear_backward(&lc.ctx, &d_ao, &layer.attn_out, &mut lg.attn_out);
        let (dq, dk, dv) = attention_backward(
            &d_ctx, &lc.q, &lc.k, &lc.v, &lc.probs, batch, seq, hd, cfg.num_heads,
        );
        let mut d_x = d_h1pre;
        for (lin, glin, d) in [
            (&layer.query, &mut lg.query, &dq),
            (&layer.key, &mut lg.key, &dk),
            (&layer.value, &mut lg.value, &dv),
        ] {
            let part = ops::linear_backward(&lc.x, d, lin, glin);
            for (a, b) in d_x.iter_mut().zip(part) {
                *a += b;
            }
        }
        dx = d_x;
    }

    ops::apply_mask(&mut dx, &cache.embed_drop);
    let d_x0 = ops::layer_norm_backward(&dx, hd, &cache.embed_ln, &params.embed_norm, &mut g.embed_norm);
    for (i, row) in d_x0.chunks(hd).enumerate() {
        let id = cache.ids[i] as usize;
        let pos = i % seq;
        for j in 0..hd {
            g.word_embeddings.data[id * hd + j] += row[j];
            g.position_embeddings.data[pos * hd + j] += row[j];
        }
    }
    Ok(g)
}
