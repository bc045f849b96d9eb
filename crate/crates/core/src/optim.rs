//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Learning-rate multiplier over a run of `total` steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup to 1, then cosine decay to `min_ratio` at `total`.
    Cosine { warmup: usize, min_ratio: f64 },
}

impl LrSchedule {
    /// Multiplier for 0-based `step`; steps past `total` keep the final value.
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { warmup, min_ratio } => {
                if step < warmup {
                    return (step + 1) as f64 / warmup as f64;
                }
                let span = total.saturating_sub(warmup).max(1);
                let progress = ((step - warmup) as f64 / span as f64).min(1.0);
                min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    /// `cfg` with its learning rate scaled for `step`.
    pub fn apply(&self, cfg: &AdamWConfig, step: usize, total: usize) -> AdamWConfig {
        AdamWConfig {
            lr: cfg.lr * self.factor(step, total),
            ..*cfg
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T: Real = f32> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamWState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update of a single parameter buffer. `step` is the 1-based
/// step count after incrementing.
pub fn adamw_update<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    cfg: &AdamWConfig,
) {
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let bc1 = T::one() - T::of(cfg.beta1.powi(step as i32));
    let bc2 = T::one() - T::of(cfg.beta2.powi(step as i32));
    let (lr, eps, wd) = (T::of(cfg.lr), T::of(cfg.eps), T::of(cfg.weight_decay));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] = param[i] - lr * wd * param[i] - lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Applies one step using the gradients accumulated in `store`.
///
/// Parameters without a gradient are treated as having a zero gradient.
/// Fails without touching any parameter if a gradient is NaN or infinite.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    for id in store.ids() {
        if let Some(g) = store.get(id).grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(store.name(id).to_string()));
            }
        }
    }
    state.step += 1;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        let grad = t.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.numel()]);
        let i = id.index();
        adamw_update(t.data_mut(), &grad, &mut state.m[i], &mut state.v[i], state.step, cfg);
    }
    Ok(())
}

/// Scales accumulated gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            if let Some(g) = t.take_grad() {
                let scaled: Vec<T> = g.into_iter().map(|v| v * T::of(s)).collect();
                t.accumulate_grad(&scaled).expect("same length");
            }
        }
    }
    norm
}
