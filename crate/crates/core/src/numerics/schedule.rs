use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Linear warmup, constant hold, then geometric decay per epoch.
///
/// Epochs are 1-based. Epoch 1 runs at `lr_start`, epoch `warmup_epochs`
/// reaches `lr_peak`, the rate stays at `lr_peak` for `hold_epochs` more
/// epochs, and every later epoch multiplies it by `decay_factor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_start: f64,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    pub hold_epochs: usize,
    pub decay_factor: f64,
    pub total_epochs: usize,
}

impl LrSchedule {
    /// 2e-4 → 2e-3 over 10 epochs, peak through epoch 17, `1/√2` decay
    /// afterwards, 30 epochs total.
    pub fn long_warmup_long_hold() -> Self {
        LrSchedule {
            lr_start: 2e-4,
            lr_peak: 2e-3,
            warmup_epochs: 10,
            hold_epochs: 7,
            decay_factor: std::f64::consts::FRAC_1_SQRT_2,
            total_epochs: 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start > 0.0 && self.lr_start <= self.lr_peak) {
            return Err(domain("schedule needs 0 < lr_start <= lr_peak"));
        }
        if self.warmup_epochs < 1 {
            return Err(domain("schedule needs warmup_epochs >= 1"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(domain("schedule needs 0 < decay_factor < 1"));
        }
        Ok(())
    }

    /// Last epoch that runs at the peak rate.
    pub fn hold_end(&self) -> usize {
        self.warmup_epochs + self.hold_epochs
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> Result<f64> {
        self.validate()?;
        if epoch < 1 || epoch > self.total_epochs {
            return Err(domain(format!(
                "epoch {epoch} outside 1..={}",
                self.total_epochs
            )));
        }
        if epoch <= self.warmup_epochs {
            if self.warmup_epochs == 1 {
                return Ok(self.lr_peak);
            }
            let frac = (epoch - 1) as f64 / (self.warmup_epochs - 1) as f64;
            return Ok(self.lr_start + (self.lr_peak - self.lr_start) * frac);
        }
        if epoch <= self.hold_end() {
            return Ok(self.lr_peak);
        }
        Ok(self.lr_peak * self.decay_factor.powi((epoch - self.hold_end()) as i32))
    }
}
