use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::InstanceField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    /// Steps skipped because of a non-finite gradient.
    pub skipped: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0, skipped: 0 }
    }
}

/// One bias-corrected Adam update. Returns `false` when the step was
/// skipped because the gradient is not finite.
pub fn adam_step(state: &mut AdamState, field: &mut InstanceField, grad: &[f64], cfg: &AdamConfig) -> Result<bool> {
    let n = field.theta().len();
    if grad.len() != n || state.m.len() != n {
        return Err(Error::Shape { expected: n, got: grad.len().min(state.m.len()) });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        log::warn!("non-finite gradient for instance {}; step skipped", field.global_id());
        return Ok(false);
    }
    state.step += 1;
    let b1c = 1.0 - cfg.beta1.powi(state.step as i32);
    let b2c = 1.0 - cfg.beta2.powi(state.step as i32);
    let (m, v) = (&mut state.m, &mut state.v);
    field.update(|theta| {
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mh = m[i] / b1c;
            let vh = v[i] / b2c;
            theta[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    });
    Ok(true)
}
