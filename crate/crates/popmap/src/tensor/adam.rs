//! Adam optimizer with per-parameter-group learning rates.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Parameters sharing one learning rate.
pub struct ParamGroup {
    pub params: Vec<Tensor>,
    pub lr: f64,
}

/// Bias-corrected Adam. Moment buffers match parameter shapes; one step
/// increments the shared step count.
pub struct Adam {
    groups: Vec<ParamGroup>,
    cfg: AdamConfig,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
    lr_scale: f64,
}

impl Adam {
    pub fn new(groups: Vec<ParamGroup>, cfg: AdamConfig) -> Result<Adam> {
        for g in &groups {
            if g.lr <= 0.0 {
                return Err(Error::config(format!("adam lr must be > 0, got {}", g.lr)));
            }
        }
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for g in &groups {
            for p in &g.params {
                m.push(vec![0.0; p.len()]);
                v.push(vec![0.0; p.len()]);
            }
        }
        Ok(Adam {
            groups,
            cfg,
            first_moment: m,
            second_moment: v,
            step_count: 0,
            lr_scale: 1.0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Multiplies every group's base learning rate for subsequent steps;
    /// used by schedules (e.g. cosine decay). Must be non-negative.
    pub fn set_lr_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale >= 0.0) {
            return Err(Error::config(format!("lr scale must be >= 0, got {scale}")));
        }
        self.lr_scale = scale;
        Ok(())
    }

    /// One bias-corrected update from the gradients currently stored on the
    /// parameters. Errors if any parameter has no gradient.
    pub fn step(&mut self) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        let mut idx = 0;
        for g in &self.groups {
            for p in &g.params {
                let grad = p
                    .grad()
                    .ok_or_else(|| Error::state("adam step: parameter has no gradient"))?;
                let m = &mut self.first_moment[idx];
                let v = &mut self.second_moment[idx];
                p.with_data_mut(|data| {
                    for i in 0..data.len() {
                        m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * grad[i];
                        v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * grad[i] * grad[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        data[i] -=
                            self.lr_scale * g.lr * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
                    }
                });
                idx += 1;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for g in &self.groups {
            for p in &g.params {
                p.zero_grad();
            }
        }
    }
}
