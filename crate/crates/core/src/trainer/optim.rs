use crate::encoder::{ModelParams, ParamKind};
use crate::real::Real;

use super::TrainError;

/// AdamW hyperparameters for one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct OptimState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    /// Updates applied so far.
    pub step: u64,
}

impl<T: Real> PartialEq for OptimState<T> {
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step && self.m == other.m && self.v == other.v
    }
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update of a flat slice. `t` is the 1-based step used for bias
/// correction; `decay` enables decoupled weight decay for this slice.
pub fn adamw_update<T: Real>(
    p: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    hp: &AdamW,
    t: u64,
    decay: bool,
) {
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    let shrink = if decay { 1.0 - hp.lr * hp.weight_decay } else { 1.0 };
    for i in 0..p.len() {
        let gi = g[i].to_f64();
        let mi = hp.beta1 * m[i].to_f64() + (1.0 - hp.beta1) * gi;
        let vi = hp.beta2 * v[i].to_f64() + (1.0 - hp.beta2) * gi * gi;
        m[i] = T::from_f64(mi);
        v[i] = T::from_f64(vi);
        let update = (mi / bc1) / ((vi / bc2).sqrt() + hp.eps);
        p[i] = T::from_f64(p[i].to_f64() * shrink - hp.lr * update);
    }
}

/// AdamW over every tensor; weight decay touches `Matrix` tensors only.
pub fn adamw_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut OptimState<T>,
    hp: &AdamW,
) -> Result<(), TrainError> {
    if grads.config != params.config || state.m.config != params.config {
        return Err(TrainError::Contract("optimizer state and gradients must match the model shape".into()));
    }
    state.step += 1;
    let t = state.step;
    let gs = grads.tensors();
    let mut ms = state.m.tensors_mut();
    let mut vs = state.v.tensors_mut();
    for (i, (name, kind, p)) in params.tensors_mut().into_iter().enumerate() {
        let g = gs[i].2;
        if g.shape != p.shape || ms[i].2.shape != p.shape {
            return Err(TrainError::Contract(format!("shape mismatch at {name}")));
        }
        adamw_update(
            &mut p.data,
            &g.data,
            &mut ms[i].2.data,
            &mut vs[i].2.data,
            hp,
            t,
            kind == ParamKind::Matrix,
        );
    }
    Ok(())
}

pub fn global_norm<T: Real>(grads: &ModelParams<T>) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|(_, _, t)| t.data.iter())
        .map(|x| {
            let v = x.to_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut ModelParams<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for (_, _, t) in grads.tensors_mut() {
            for x in t.data.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;

    fn hp(lr: f64, wd: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn single_scalar_first_step_closed_form() {
        // After one step from zero moments: m_hat = g, v_hat = g^2, so the
        // update is lr * g / (|g| + eps).
        for &g in &[0.3f64, -2.5, 1e-3] {
            let mut p = [1.0f64];
            let (mut m, mut v) = ([0.0], [0.0]);
            adamw_update(&mut p, &[g], &mut m, &mut v, &hp(1e-3, 0.0), 1, true);
            let expected = 1.0 - 1e-3 * g / (g.abs() + 1e-8);
            assert!((p[0] - expected).abs() < 1e-15, "{} vs {expected}", p[0]);
            assert!((m[0] - 0.1 * g).abs() < 1e-15);
            assert!((v[0] - 0.001 * g * g).abs() <= 1e-14 * v[0]);
        }
        // with decay the parameter is shrunk first
        let mut p = [2.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut p, &[0.5], &mut m, &mut v, &hp(0.1, 0.01), 1, true);
        let expected = 2.0 * (1.0 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn second_step_uses_bias_correction() {
        let mut p = [0.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        let h = hp(0.01, 0.0);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, &h, 1, false);
        adamw_update(&mut p, &[-1.0], &mut m, &mut v, &h, 2, false);
        let m2 = 0.9 * 0.1 - 0.1;
        let v2 = 0.999 * 0.001 + 0.001;
        let step2 = (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64 * 0.999)).sqrt() + 1e-8);
        let expected = -0.01 * 1.0 / (1.0 + 1e-8) - 0.01 * step2;
        assert!((p[0] - expected).abs() < 1e-15);
    }

    fn small() -> ModelConfig {
        ModelConfig {
            hidden_size: 4,
            num_layers: 1,
            num_heads: 2,
            ffn_size: 8,
            maxlen: 8,
            vocab_size: 10,
            dropout_p: 0.0,
            layernorm_eps: 1e-12,
            seed: 1,
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = ModelParams::<f32>::init(&small()).unwrap();
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = OptimState::new(&p);
        adamw_step(&mut p, &g, &mut st, &hp(1e-3, 0.0)).unwrap();
        for ((_, _, a), (_, _, b)) in p.tensors().into_iter().zip(before.tensors()) {
            assert_eq!(a.data, b.data);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn decay_shrinks_matrices_only() {
        let mut p = ModelParams::<f64>::init(&small()).unwrap();
        for (_, _, t) in p.tensors_mut() {
            t.data.fill(0.5);
        }
        let g = p.zeros_like();
        let mut st = OptimState::new(&p);
        adamw_step(&mut p, &g, &mut st, &hp(0.1, 0.01)).unwrap();
        for (name, kind, t) in p.tensors() {
            let want = if kind == ParamKind::Matrix { 0.5 * (1.0 - 0.1 * 0.01) } else { 0.5 };
            assert!(t.data.iter().all(|&x| x == want), "{name}");
        }
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let p = ModelParams::<f64>::init(&small()).unwrap();
        let mut g = p.zeros_like();
        for (_, _, t) in g.tensors_mut() {
            t.data.fill(1.0);
        }
        let n = g.num_params() as f64;
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - n.sqrt()).abs() < 1e-9);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let again = clip_global_norm(&mut g, 1.0);
        assert!((again - 1.0).abs() < 1e-12);
    }
}
