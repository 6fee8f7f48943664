use serde::{Deserialize, Serialize};

use super::{ParamVector, Result, TensorError};

/// `params - lr * grads` as a new vector.
pub fn sgd_step(params: &ParamVector, grads: &ParamVector, lr: f32) -> Result<ParamVector> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(TensorError::Invalid(format!(
            "sgd learning rate must be finite and non-negative, got {lr}"
        )));
    }
    params.zip_map(grads, |p, g| p - lr * g)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_eps")]
    pub eps: f32,
    #[serde(default)]
    pub weight_decay: f32,
}

fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_eps() -> f32 {
    1e-8
}

impl AdamConfig {
    pub fn new(lr: f32) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f32) -> Self {
        self.weight_decay = wd;
        self
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamVector,
    pub v: ParamVector,
}

impl AdamState {
    pub fn new(params: &ParamVector) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One Adam step with bias correction. Weight decay is decoupled: params are
/// shrunk by `lr * weight_decay * param` before the adaptive update.
pub fn adam_step(
    state: &AdamState,
    params: &ParamVector,
    grads: &ParamVector,
    cfg: &AdamConfig,
) -> Result<(ParamVector, AdamState)> {
    params.check_aligned(grads)?;
    params.check_aligned(&state.m)?;
    params.check_aligned(&state.v)?;
    let step = state.step + 1;
    let m = state
        .m
        .zip_map(grads, |m, g| cfg.beta1 * m + (1.0 - cfg.beta1) * g)?;
    let v = state
        .v
        .zip_map(grads, |v, g| cfg.beta2 * v + (1.0 - cfg.beta2) * g * g)?;
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(step as i32);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(step as i32);
    let decay = cfg.lr * cfg.weight_decay;
    let decayed = params.zip_map(params, |p, _| p - decay * p)?;
    let update = m.zip_map(&v, |m, v| {
        let m_hat = m as f64 / bc1;
        let v_hat = v as f64 / bc2;
        (cfg.lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32
    })?;
    let next = decayed.zip_map(&update, |p, u| p - u)?;
    Ok((next, AdamState { step, m, v }))
}
