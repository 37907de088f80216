//! AdamW with decoupled weight decay and a cosine-annealed learning rate.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers, one pair per parameter, kept in f64.
#[derive(Clone, Debug, Default)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new<T: Real>(store: &ParamStore<T>) -> Self {
        AdamWState {
            step: 0,
            m: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }
}

/// One update from the gradients accumulated in `store`:
///
/// ```text
/// θ ← θ − lr·wd·θ
/// θ ← θ − lr·m̂ / (√v̂ + eps)
/// ```
pub fn adamw_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamWState, lr: f64, hp: &AdamWParams) {
    if state.m.len() != store.len() {
        *state = AdamWState::new(store);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        let grad = &p.grad;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let value = std::sync::Arc::make_mut(&mut p.value);
        for (k, w) in value.data_mut().iter_mut().enumerate() {
            let g = grad[k].as_f64();
            m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * g;
            v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * g * g;
            let mut x = w.as_f64();
            x -= lr * hp.weight_decay * x;
            x -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + hp.eps);
            *w = T::of(x);
        }
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(πt/T))`, clamped to `t ∈ [0, T]`.
pub fn cosine_lr(t: u64, total: u64, lr_max: f64, lr_min: f64) -> f64 {
    let total = total.max(1);
    let frac = t.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}
