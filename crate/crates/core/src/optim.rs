//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{MmdgError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter plus the shared step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// Updates every trainable parameter named in `grads`. Frozen parameters
/// are left untouched even when a gradient is supplied.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    cfg: &AdamConfig,
    state: &mut AdamState,
) -> Result<()> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(MmdgError::NonFiniteGradient(name.clone()));
        }
        let p = store.get(name)?;
        if p.tensor.len() != g.len() {
            return Err(MmdgError::Config(format!(
                "gradient of {name} has {} values for {} parameters",
                g.len(),
                p.tensor.len()
            )));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (name, g) in grads {
        if !store.get(name)?.trainable {
            continue;
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let p = store.tensor_mut(name)?.data_mut();
        for k in 0..g.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            p[k] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p[k]);
        }
    }
    Ok(())
}
