use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.99,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 1000,
        }
    }
}

impl AdamConfig {
    /// Learning-rate multiplier at 1-based `step`: linear ramp over the warmup.
    pub fn warmup_factor(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            1.0
        } else {
            step as f64 / self.warmup_steps as f64
        }
    }
}

/// One bias-corrected Adam update of a single array. `step` is 1-based;
/// `lr` is the already warmed-up rate.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: usize,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: "adam_step" });
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        param[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a [`ParamStore`], with one base learning rate per parameter group.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub lrs: BTreeMap<ParamGroup, f64>,
    step: usize,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig, lrs: BTreeMap<ParamGroup, f64>) -> Self {
        let first = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        let second = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            lrs,
            step: 0,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self, group: ParamGroup) -> f64 {
        self.lrs.get(&group).copied().unwrap_or(0.0) * self.config.warmup_factor(self.step.max(1))
    }

    /// Applies the accumulated gradients (times `grad_scale`) to every
    /// trainable parameter with a configured learning rate.
    pub fn step(&mut self, store: &mut ParamStore, grad_scale: f64) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::shape("adam_step", "parameter count changed since construction"));
        }
        self.step += 1;
        let warm = self.config.warmup_factor(self.step);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let Some(&lr) = self.lrs.get(&p.group) else { continue };
            if !p.trainable || lr == 0.0 {
                continue;
            }
            let grad: Vec<f64> = p.grad.iter().map(|g| g * grad_scale).collect();
            let i = id.index();
            adam_update(
                p.value.data_mut(),
                &grad,
                &mut self.first[i],
                &mut self.second[i],
                self.step,
                lr * warm,
                &self.config,
            )?;
        }
        Ok(())
    }
}
