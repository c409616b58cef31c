//! Learning-rate and augmentation-strength schedules.

use serde::{Deserialize, Serialize};

use crate::error::{precondition, Result};

/// Augmentation strength `μ_e = 1 − ⌊e/K⌋·K/E` and loss weight `ω_e = ν(1 − μ_e)`.
pub fn dynacl_schedule(
    epoch: usize,
    decay_period: usize,
    total_epochs: usize,
    reweight_rate: f64,
) -> Result<(f64, f64)> {
    if epoch >= total_epochs {
        return Err(precondition(format!(
            "epoch {epoch} outside 0..{total_epochs}"
        )));
    }
    if decay_period == 0 {
        return Err(precondition("decay period must be positive"));
    }
    let mu = 1.0 - ((epoch / decay_period) * decay_period) as f64 / total_epochs as f64;
    Ok((mu, reweight_rate * (1.0 - mu)))
}

/// `η0 (1 + cos(π·step/total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if step > total_steps {
        return Err(precondition(format!("step {step} beyond {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr0 * (1.0 + phase.cos()) / 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub epoch: usize,
    pub total_epochs: usize,
    pub decay_period: usize,
    pub reweight_rate: f64,
    pub mu: f64,
    pub omega: f64,
}

impl SchedulerState {
    pub fn at(
        epoch: usize,
        decay_period: usize,
        total_epochs: usize,
        reweight_rate: f64,
    ) -> Result<Self> {
        let (mu, omega) = dynacl_schedule(epoch, decay_period, total_epochs, reweight_rate)?;
        Ok(Self {
            epoch,
            total_epochs,
            decay_period,
            reweight_rate,
            mu,
            omega,
        })
    }
}
