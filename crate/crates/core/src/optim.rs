//! AdamW with decoupled weight decay and the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// First and second moments, one buffer per parameter, plus the number of
/// updates taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// One AdamW update. `grads[i]` belongs to the `i`-th parameter; `None`
/// leaves that parameter and its moments untouched.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Option<Vec<T>>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Training(format!(
            "optimizer got {} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, g) in ids.iter().zip(grads) {
        if let Some(g) = g {
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient {bad} for parameter {}",
                    store.name(*id)
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let bc1 = T::lit(1.0 - cfg.beta1.powi(t));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(t));
    let decay = T::lit(1.0 - lr * cfg.weight_decay);
    let lr_t = T::lit(lr);
    let eps = T::lit(cfg.eps);
    for (i, (id, g)) in ids.iter().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let theta = store.get_mut(*id).data_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..theta.len() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            theta[j] = theta[j] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `lr_min + (lr0 - lr_min) (1 + cos(pi step / total)) / 2`, exact at both
/// ends and held at `lr_min` past `total`.
pub fn cosine_lr(step: u64, total: u64, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 || step >= total {
        return lr_min;
    }
    let w = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
    if w >= 1.0 {
        lr0
    } else {
        (lr_min + w * (lr0 - lr_min)).min(lr0)
    }
}
