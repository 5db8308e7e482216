use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Tokens per training sequence (inputs; targets are shifted by one).
    pub seq_len: usize,
    /// Optimizer steps. Zero means `epochs` full passes over the data.
    pub max_steps: u64,
    pub epochs: u64,
    pub lr_initial: f64,
    /// Defaults to `lr_initial / 10`.
    pub lr_final: Option<f64>,
    /// Defaults to 1% of the total step count.
    pub warmup_steps: Option<u64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    /// Log every this many steps (0 disables progress logs).
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            seq_len: 64,
            max_steps: 0,
            epochs: 1,
            lr_initial: 4e-5,
            lr_final: None,
            warmup_steps: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: None,
            seed: 0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn lr_final(&self) -> f64 {
        self.lr_final.unwrap_or(self.lr_initial / 10.0)
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup_steps.unwrap_or(self.max_steps / 100)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_initial > 0.0) {
            return Err(Error::Config("lr_initial must be positive".into()));
        }
        if !(self.lr_final() >= 0.0) {
            return Err(Error::Config("lr_final must be non-negative".into()));
        }
        if self.max_steps > 0 && self.warmup_steps() > self.max_steps {
            return Err(Error::Config("warmup_steps exceeds max_steps".into()));
        }
        if self.max_steps == 0 && self.epochs == 0 {
            return Err(Error::Config("need max_steps or epochs".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0,1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    /// Fix the step budget for a dataset of `batches_per_epoch` batches.
    pub(crate) fn resolved(&self, batches_per_epoch: u64) -> Self {
        let mut c = self.clone();
        if c.max_steps == 0 {
            c.max_steps = c.epochs * batches_per_epoch;
        }
        c.lr_final = Some(self.lr_final());
        c.warmup_steps = Some(c.warmup_steps());
        c
    }
}

/// Learning rate at `step`: linear warmup from 0 to `lr_initial` over the
/// warmup steps, then linear decay to `lr_final` at `max_steps`.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    let warmup = config.warmup_steps();
    let (lr0, lr1) = (config.lr_initial, config.lr_final());
    if step < warmup {
        return lr0 * step as f64 / warmup as f64;
    }
    let total = config.max_steps.max(warmup);
    if total == warmup {
        return lr0;
    }
    let frac = (step.min(total) - warmup) as f64 / (total - warmup) as f64;
    lr0 + (lr1 - lr0) * frac
}
