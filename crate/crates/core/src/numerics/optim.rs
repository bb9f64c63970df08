use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::Gradients;
use crate::numerics::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW moments for every parameter of one store.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.tensor(id).len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update of every parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.step += 1;
        for (id, g) in grads.params() {
            if !store.is_trainable(id) {
                continue;
            }
            let (m, v) = (&mut self.first[id], &mut self.second[id]);
            let param = store.tensor_mut(id).data_mut();
            adamw_update(param, g, m, v, self.step, &self.config)?;
        }
        Ok(())
    }
}

/// Single AdamW update on raw slices; `t` is the 1-based step number.
///
/// Weight decay is decoupled: it shrinks the parameter directly and never
/// enters the moment estimates.
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(Error::Shape(format!(
            "adamw: param {} grad {} moments {}/{}",
            param.len(),
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        if cfg.weight_decay != 0.0 {
            param[i] -= cfg.lr * cfg.weight_decay * param[i];
        }
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}
