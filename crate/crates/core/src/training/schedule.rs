//! Step-indexed schedules for the channel-dropout rate and learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{CsfError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub dropout_ramp_steps: u64,
    pub dropout_final: f64,
    pub lr_warmup_steps: u64,
    pub base_lr: f64,
    pub total_steps: u64,
    pub batch_size: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            dropout_ramp_steps: 800,
            dropout_final: 0.66,
            lr_warmup_steps: 300,
            base_lr: 0.01,
            total_steps: 600,
            batch_size: 64,
        }
    }
}

impl TrainSchedule {
    /// `total_steps == 0` is accepted (it writes only the initial
    /// checkpoint), otherwise the warm-up must fit in the run.
    pub fn validate(&self) -> Result<()> {
        if self.dropout_ramp_steps == 0 || self.lr_warmup_steps == 0 {
            return Err(CsfError::Config(
                "dropout_ramp_steps and lr_warmup_steps must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_final) {
            return Err(CsfError::Config(format!(
                "dropout_final must lie in [0, 1), got {}",
                self.dropout_final
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(CsfError::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.batch_size < 2 {
            return Err(CsfError::Config("batch_size must be at least 2".into()));
        }
        if self.total_steps > 0 && self.lr_warmup_steps > self.total_steps {
            return Err(CsfError::Config(format!(
                "lr_warmup_steps ({}) exceeds total_steps ({})",
                self.lr_warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `dropout_final` over `dropout_ramp_steps`, then flat.
pub fn dropout_schedule(step: u64, s: &TrainSchedule) -> f64 {
    s.dropout_final * ramp(step, s.dropout_ramp_steps)
}

/// Linear warm-up from 0 to `base_lr` over `lr_warmup_steps`, then flat.
pub fn lr_schedule(step: u64, s: &TrainSchedule) -> f64 {
    s.base_lr * ramp(step, s.lr_warmup_steps)
}

fn ramp(step: u64, length: u64) -> f64 {
    if step >= length {
        1.0
    } else {
        step as f64 / length as f64
    }
}
