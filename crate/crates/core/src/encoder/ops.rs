use rand::{Rng, RngExt};

use super::{LayerNorm, Linear};
use crate::real::Real;

pub(crate) struct NormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm<T: Real>(
    x: &[T],
    dim: usize,
    ln: &LayerNorm<T>,
    eps: T,
) -> (Vec<T>, NormCache<T>) {
    let rows = x.len() / dim;
    let mut y = vec![T::ZERO; x.len()];
    let mut xhat = vec![T::ZERO; x.len()];
    let mut rstd = vec![T::ZERO; rows];
    let n = T::from_f64(dim as f64);
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let s = T::ONE / (var + eps).sqrt();
        rstd[r] = s;
        for j in 0..dim {
            let h = (row[j] - mean) * s;
            xhat[r * dim + j] = h;
            y[r * dim + j] = h * ln.gamma.data[j] + ln.beta.data[j];
        }
    }
    (y, NormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward<T: Real>(
    dy: &[T],
    dim: usize,
    cache: &NormCache<T>,
    ln: &LayerNorm<T>,
    grad: &mut LayerNorm<T>,
) -> Vec<T> {
    let rows = dy.len() / dim;
    let n = T::from_f64(dim as f64);
    let mut dx = vec![T::ZERO; dy.len()];
    let mut dxhat = vec![T::ZERO; dim];
    for r in 0..rows {
        let base = r * dim;
        let mut sum_d = T::ZERO;
        let mut sum_dx = T::ZERO;
        for j in 0..dim {
            let g = dy[base + j];
            let h = cache.xhat[base + j];
            grad.gamma.data[j] += g * h;
            grad.beta.data[j] += g;
            let d = g * ln.gamma.data[j];
            dxhat[j] = d;
            sum_d += d;
            sum_dx += d * h;
        }
        let s = cache.rstd[r] / n;
        for j in 0..dim {
            dx[base + j] = s * (n * dxhat[j] - sum_d - cache.xhat[base + j] * sum_dx);
        }
    }
    dx
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64(INV_SQRT_2PI) * (-(half * x * x)).exp();
    cdf + x * pdf
}

/// `x W + b` for `rows x in` input.
pub(crate) fn linear<T: Real>(x: &[T], lin: &Linear<T>) -> Vec<T> {
    let (inp, out) = (lin.weight.shape[0], lin.weight.shape[1]);
    let rows = x.len() / inp;
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(&lin.bias.data);
    }
    T::gemm_raw(
        rows, inp, out, T::ONE, x, inp as isize, 1, &lin.weight.data, out as isize, 1, T::ONE,
        &mut y, out as isize, 1,
    );
    y
}

/// Accumulates weight and bias gradients into `grad`; returns `dy W^T`.
pub(crate) fn linear_backward<T: Real>(
    x: &[T],
    dy: &[T],
    lin: &Linear<T>,
    grad: &mut Linear<T>,
) -> Vec<T> {
    let (inp, out) = (lin.weight.shape[0], lin.weight.shape[1]);
    let rows = dy.len() / out;
    // dW += x^T dy
    T::gemm_raw(
        inp, rows, out, T::ONE, x, 1, inp as isize, dy, out as isize, 1, T::ONE,
        &mut grad.weight.data, out as isize, 1,
    );
    for r in 0..rows {
        for (b, &g) in grad.bias.data.iter_mut().zip(&dy[r * out..(r + 1) * out]) {
            *b += g;
        }
    }
    let mut dx = vec![T::ZERO; rows * inp];
    T::gemm_raw(
        rows, out, inp, T::ONE, dy, out as isize, 1, &lin.weight.data, 1, out as isize, T::ZERO,
        &mut dx, inp as isize, 1,
    );
    dx
}

/// Inverted-dropout multipliers: 0 with probability `p`, else `1 / (1 - p)`.
pub(crate) fn dropout_mask<T: Real, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<T> {
    let keep = T::from_f64(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.random::<f64>() < p { T::ZERO } else { keep })
        .collect()
}

pub(crate) fn apply_mask<T: Real>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Tensor;

    #[test]
    fn gelu_matches_reference_values() {
        // Phi(1) = 0.8413447460685429, Phi(-0.5) = 0.3085375387259869
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((gelu(-0.5f64) + 0.5 * 0.308_537_538_725_986_9).abs() < 1e-15);
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let ln = LayerNorm {
            gamma: Tensor::filled(&[4], 1.0f64),
            beta: Tensor::zeros(&[4]),
        };
        let (y, _) = layer_norm(&[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 0.0, 1.0], 4, &ln, 1e-12);
        for row in y.chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }
}
