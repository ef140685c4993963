//! Losses, teacher/student coupling, schedules and the pretraining step.

mod loss;
mod optim;
mod schedule;
mod state;
mod step;

use serde::{Deserialize, Serialize};

use crate::error::{AsitError, Result};

pub use loss::{
    center_then_sharpen, global_distill_loss, local_distill_loss, loss_weights, recon_loss, row_entropy, sharpen,
    total_loss, GlobalLoss, LossParts, MaskedLoss, Reduction, TaskToggles,
};
pub use optim::AdamW;
pub use schedule::{cosine_schedule, warmup_cosine};
pub use state::{ema_update, update_center, TwinModelState};
pub use step::{patchify_mask, prepare_sample, Pretrainer, StepReport, TrainSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub tau_t: f64,
    pub tau_s: f64,
    /// Teacher momentum at step 0; rises along a cosine to `lambda_end`.
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub center_momentum: f64,
    /// Also center the local head's teacher outputs.
    pub center_local: bool,
    pub alpha_recons: f64,
    pub alpha_lcl: f64,
    pub alpha_gcl: f64,
    pub reduction: Reduction,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau_t: 0.07,
            tau_s: 0.1,
            lambda_start: 0.996,
            lambda_end: 1.0,
            center_momentum: 0.9,
            center_local: true,
            alpha_recons: 1.0,
            alpha_lcl: 1.0,
            alpha_gcl: 1.0,
            reduction: Reduction::Mean,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_t > 0.0 && self.tau_t < self.tau_s) {
            return Err(AsitError::config("distill.tau_t", "need 0 < tau_t < tau_s"));
        }
        for (k, v) in [("distill.lambda_start", self.lambda_start), ("distill.lambda_end", self.lambda_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(AsitError::config(k, format!("must lie in [0, 1], got {v}")));
            }
        }
        if !(self.center_momentum > 0.0 && self.center_momentum < 1.0) {
            return Err(AsitError::config("distill.center_momentum", "must lie in (0, 1)"));
        }
        for (k, v) in [
            ("distill.alpha_recons", self.alpha_recons),
            ("distill.alpha_lcl", self.alpha_lcl),
            ("distill.alpha_gcl", self.alpha_gcl),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(AsitError::config(k, "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn alpha(&self) -> [f64; 3] {
        [self.alpha_recons, self.alpha_lcl, self.alpha_gcl]
    }

    pub fn lambda_at(&self, step: u64, total: u64) -> f64 {
        cosine_schedule(self.lambda_start, self.lambda_end, step, total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub recon: bool,
    pub lcl: bool,
    pub gcl: bool,
    /// Checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Data preparation threads feeding the step loop; 1 keeps it inline.
    pub workers: usize,
    pub queue_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-4,
            min_lr: 1e-6,
            warmup_frac: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            wd_start: 0.04,
            wd_end: 0.4,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            recon: true,
            lcl: true,
            gcl: true,
            checkpoint_every: 1,
            workers: 1,
            queue_depth: 4,
        }
    }
}

impl TrainConfig {
    pub fn toggles(&self) -> TaskToggles {
        TaskToggles {
            recon: self.recon,
            lcl: self.lcl,
            gcl: self.gcl,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(AsitError::config("train.base_lr", "must be > 0"));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(AsitError::config("train.min_lr", "need 0 <= min_lr <= base_lr"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(AsitError::config("train.warmup_frac", "must lie in [0, 1)"));
        }
        for (k, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(AsitError::config(k, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(AsitError::config("train.adam_eps", "must be > 0"));
        }
        for (k, v) in [("train.wd_start", self.wd_start), ("train.wd_end", self.wd_end)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(AsitError::config(k, "must be finite and >= 0"));
            }
        }
        if self.batch_size == 0 {
            return Err(AsitError::config("train.batch_size", "must be >= 1"));
        }
        if self.workers == 0 || self.queue_depth == 0 {
            return Err(AsitError::config("train.workers", "workers and queue_depth must be >= 1"));
        }
        self.toggles().validate()
    }

    pub fn warmup_steps(&self, total: u64) -> u64 {
        (self.warmup_frac * total as f64).ceil() as u64
    }

    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        warmup_cosine(self.base_lr, self.min_lr, self.warmup_steps(total), step, total)
    }

    pub fn wd_at(&self, step: u64, total: u64) -> f64 {
        cosine_schedule(self.wd_start, self.wd_end, step, total)
    }
}
