use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..AdamConfig::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("adam_step", format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("adam_step", "betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("adam_step", "eps must be positive"));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of every parameter, then zero the grads.
pub fn adam_step(params: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    if params.is_frozen() {
        return Err(Error::invalid("adam_step", "parameter store is frozen"));
    }
    for (name, p) in params.iter_mut() {
        p.grad.ensure_finite("adam_step")?;
        if p.first_moment.shape() != p.value.shape() || p.second_moment.shape() != p.value.shape() {
            return Err(Error::Inconsistent(format!("optimizer state shape of `{name}`")));
        }
        p.step += 1;
        let t = p.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let values = p.value.data_mut();
        let grads = p.grad.data();
        let m = p.first_moment.data_mut();
        let v = p.second_moment.data_mut();
        for i in 0..values.len() {
            let g = grads[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        p.value.ensure_finite("adam_step")?;
    }
    params.zero_grads();
    Ok(())
}
