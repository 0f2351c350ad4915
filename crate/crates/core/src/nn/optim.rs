use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8 }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::new(1e-3, 0.9, 0.999)
    }
}

/// Parameters plus their Adam moments and the number of updates applied.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: ParamStore,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub rng_seed: u64,
}

impl TrainState {
    pub fn new(params: ParamStore, rng_seed: u64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            params,
            m: zeros.clone(),
            v: zeros,
            rng_seed,
        }
    }
}

/// One bias-corrected Adam update using the gradients stored on the
/// parameters, which are cleared afterwards.
pub fn adam_step(state: &mut TrainState, cfg: &AdamConfig) -> Result<()> {
    if let Some(i) = state.params.tensors.iter().position(|t| t.grad.is_none()) {
        return Err(Error::invalid(format!(
            "parameter `{}` has no gradient",
            state.params.names[i]
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((param, m), v) in state.params.tensors.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = param.grad.take().expect("checked above");
        for (((p, g), m), v) in param.data.iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
