//! Learning-rate schedule.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    /// Linear ramp from `min_lr` up to `max_lr` and back, once per period.
    Triangular,
    /// `base_lr` at every step (decay still applies).
    Constant,
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Triangular => "triangular",
            Self::Constant => "constant",
        })
    }
}

impl FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triangular" => Ok(Self::Triangular),
            "constant" => Ok(Self::Constant),
            other => Err(Error::InvalidConfig(format!("unknown schedule mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CyclicSchedule {
    pub min_lr: f64,
    pub max_lr: f64,
    /// Cycle length in epochs.
    pub period: f64,
    /// Multiplicative decay per optimizer step.
    pub decay: f64,
    pub mode: ScheduleMode,
}

impl Default for CyclicSchedule {
    fn default() -> Self {
        Self {
            min_lr: 1e-4,
            max_lr: 1e-3,
            period: 10.0,
            decay: 5e-4,
            mode: ScheduleMode::Triangular,
        }
    }
}

impl CyclicSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr > 0.0 && self.min_lr <= self.max_lr && self.max_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < min_lr <= max_lr, got {} and {}",
                self.min_lr, self.max_lr
            )));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::InvalidConfig(format!("decay {} outside [0, 1)", self.decay)));
        }
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(Error::InvalidConfig(format!("period {} must be positive", self.period)));
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` (0-based).
    pub fn lr(&self, base_lr: f64, step: u64, steps_per_epoch: usize) -> f64 {
        let decay = (1.0 - self.decay).powf(step as f64);
        let raw = match self.mode {
            ScheduleMode::Constant => base_lr,
            ScheduleMode::Triangular => {
                let period_steps = self.period * steps_per_epoch.max(1) as f64;
                let phase = (step as f64 / period_steps).fract();
                let tri = 1.0 - (2.0 * phase - 1.0).abs();
                self.min_lr + (self.max_lr - self.min_lr) * tri
            }
        };
        raw * decay
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_and_peak() {
        let s = CyclicSchedule::default();
        assert_eq!(s.lr(1e-3, 0, 8), 1e-4);
        // Period 10 epochs of 8 steps: peak at step 40.
        let peak = s.lr(1e-3, 40, 8);
        let want = 1e-3 * (1.0f64 - 5e-4).powi(40);
        assert!((peak - want).abs() < 1e-18, "{peak} vs {want}");
        assert!(s.lr(1e-3, 39, 8) < peak && s.lr(1e-3, 41, 8) < peak);
    }

    #[test]
    fn zero_decay_is_periodic() {
        let s = CyclicSchedule {
            decay: 0.0,
            ..Default::default()
        };
        for step in 0..80u64 {
            let a = s.lr(1e-3, step, 8);
            let b = s.lr(1e-3, step + 80, 8);
            assert!((a - b).abs() < 1e-15, "step {step}: {a} vs {b}");
            assert!((1e-4..=1e-3).contains(&a));
        }
    }

    #[test]
    fn constant_mode_uses_base() {
        let s = CyclicSchedule {
            mode: ScheduleMode::Constant,
            decay: 0.0,
            ..Default::default()
        };
        assert_eq!(s.lr(3e-4, 17, 5), 3e-4);
    }

    #[test]
    fn validation() {
        let bad = [
            CyclicSchedule { min_lr: 0.0, ..Default::default() },
            CyclicSchedule { min_lr: 2e-3, ..Default::default() },
            CyclicSchedule { decay: 1.0, ..Default::default() },
            CyclicSchedule { period: 0.0, ..Default::default() },
        ];
        for s in bad {
            assert!(s.validate().is_err(), "{s:?}");
        }
        CyclicSchedule::default().validate().unwrap();
    }
}
