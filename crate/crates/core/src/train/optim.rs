use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            warmup_epochs: 5.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Linear warmup to `base_lr`, then half-cosine decay to zero at `total`.
pub fn lr_at(cfg: &OptimizerConfig, epoch: f64, total: f64) -> f64 {
    let e = epoch.clamp(0.0, total.max(0.0));
    let w = cfg.warmup_epochs;
    if e < w {
        return cfg.base_lr * e / w;
    }
    if total <= w {
        return cfg.base_lr;
    }
    let progress = (e - w) / (total - w);
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW moments and step counter, aligned with the flat parameter index.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, len: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One decoupled-weight-decay Adam update at learning rate `lr`.
    /// `decay[i]` selects which scalars receive weight decay.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], decay: &[bool], lr: f64) -> Result<()> {
        let n = self.m.len();
        if params.len() != n || grads.len() != n || decay.len() != n {
            return arg_err(format!(
                "optimizer holds {n} moments, got {} params / {} grads / {} decay flags",
                params.len(),
                grads.len(),
                decay.len()
            ));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..n {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            if decay[i] {
                params[i] -= lr * c.weight_decay * params[i];
            }
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + c.eps);
        }
        Ok(())
    }
}
