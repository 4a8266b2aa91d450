use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Linear warmup from zero to `peak_lr`, then linear decay to `final_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub final_lr: f64,
    pub total_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            warmup_steps: 5000,
            final_lr: 1e-8,
            total_steps: 100_000,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(invalid(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.final_lr <= self.peak_lr) || self.final_lr < 0.0 {
            return Err(invalid("schedule needs 0 <= final_lr <= peak_lr"));
        }
        Ok(())
    }

    /// Learning rate at `step`. Steps past `total_steps` clamp to the endpoint.
    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.min(self.total_steps);
        if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                return self.peak_lr;
            }
            self.peak_lr * step as f64 / self.warmup_steps as f64
        } else {
            let frac = (step - self.warmup_steps) as f64
                / (self.total_steps - self.warmup_steps) as f64;
            self.peak_lr + (self.final_lr - self.peak_lr) * frac
        }
    }
}
