//! Single-triangle cyclical learning rate.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl ScheduleConfig {
    /// Warmup as a fraction of the run, rounded up so short runs still ramp.
    pub fn with_warmup_fraction(peak_lr: f64, total_steps: usize, fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("warmup fraction {fraction} outside [0, 1)")));
        }
        let warmup_steps = ((total_steps as f64 * fraction).ceil() as usize).min(total_steps);
        let cfg = ScheduleConfig { peak_lr, total_steps, warmup_steps };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.peak_lr <= 0.0 || !self.peak_lr.is_finite() {
            return Err(Error::Config(format!("peak learning rate {} must be positive", self.peak_lr)));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Triangle: linear climb to the peak across warmup, linear decay to zero at
/// `total_steps`, zero afterwards.
pub fn cyclical_lr(cfg: &ScheduleConfig, step: usize) -> f64 {
    if step >= cfg.total_steps {
        return 0.0;
    }
    if step < cfg.warmup_steps {
        return cfg.peak_lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let decay_span = (cfg.total_steps - cfg.warmup_steps) as f64;
    cfg.peak_lr * (cfg.total_steps - step) as f64 / decay_span
}
