//! Per-epoch learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    /// `base · factor^k` after passing `k` milestones.
    StepDecay {
        base_lr: f64,
        milestones: Vec<usize>,
        factor: f64,
    },
    /// `base · ½(1 + cos(π·epoch/total_epochs))`.
    Cosine { base_lr: f64, total_epochs: usize },
    Constant { base_lr: f64 },
}

impl ScheduleSpec {
    pub fn base_lr(&self) -> f64 {
        match self {
            ScheduleSpec::StepDecay { base_lr, .. }
            | ScheduleSpec::Cosine { base_lr, .. }
            | ScheduleSpec::Constant { base_lr } => *base_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let base = self.base_lr();
        if !(base >= 0.0 && base.is_finite()) {
            return config_err(format!("base_lr must be finite and >= 0, got {base}"));
        }
        match self {
            ScheduleSpec::StepDecay { milestones, factor, .. } => {
                if !(*factor > 0.0 && factor.is_finite()) {
                    return config_err("decay factor must be positive");
                }
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return config_err("milestones must be strictly increasing");
                }
            }
            ScheduleSpec::Cosine { total_epochs, .. } if *total_epochs == 0 => {
                return config_err("cosine schedule needs total_epochs >= 1");
            }
            _ => {}
        }
        Ok(())
    }

    /// Learning rate used throughout `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        match self {
            ScheduleSpec::StepDecay {
                base_lr,
                milestones,
                factor,
            } => {
                // Repeated multiplication: 0.02·0.1 is exactly the nearest double to 0.002.
                let mut lr = *base_lr;
                for _ in milestones.iter().filter(|&&m| epoch >= m) {
                    lr *= factor;
                }
                Ok(lr)
            }
            ScheduleSpec::Cosine { base_lr, total_epochs } => {
                if epoch >= *total_epochs {
                    return Err(Error::Usage(format!(
                        "epoch {epoch} outside cosine schedule of {total_epochs} epochs"
                    )));
                }
                let t = epoch as f64 / *total_epochs as f64;
                Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
            }
            ScheduleSpec::Constant { base_lr } => Ok(*base_lr),
        }
    }
}
