//! Learning-rate schedules: constant, and a three-phase ramp that warms up
//! linearly from zero, holds at the peak, then decays exponentially to a
//! configured fraction of the peak.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    WarmupHoldDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub max_lr: f64,
    pub total_steps: u64,
    pub warmup_ratio: f64,
    pub hold_ratio: f64,
    pub decay_ratio: f64,
    /// Learning rate at `total_steps` as a fraction of `max_lr`.
    pub final_lr_ratio: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::WarmupHoldDecay,
            max_lr: 5e-4,
            total_steps: 2000,
            warmup_ratio: 0.2,
            hold_ratio: 0.3,
            decay_ratio: 0.5,
            final_lr_ratio: 0.01,
        }
    }
}

impl ScheduleConfig {
    pub fn constant(max_lr: f64, total_steps: u64) -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Constant,
            max_lr,
            total_steps,
            ..ScheduleConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0) || !self.max_lr.is_finite() {
            return Err(Error::config(format!(
                "max_lr {} must be positive and finite",
                self.max_lr
            )));
        }
        if self.kind == ScheduleKind::Constant {
            return Ok(());
        }
        for (name, r) in [
            ("warmup_ratio", self.warmup_ratio),
            ("hold_ratio", self.hold_ratio),
            ("decay_ratio", self.decay_ratio),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(format!("{name} {r} outside [0, 1]")));
            }
        }
        let sum = self.warmup_ratio + self.hold_ratio + self.decay_ratio;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "phase ratios sum to {sum}, must sum to 1"
            )));
        }
        if !(self.final_lr_ratio > 0.0 && self.final_lr_ratio <= 1.0) {
            return Err(Error::config(format!(
                "final_lr_ratio {} outside (0, 1]",
                self.final_lr_ratio
            )));
        }
        Ok(())
    }
}

/// Learning rate for a 0-based step index. Steps past `total_steps` clamp to
/// the schedule's final value.
pub fn lr_at(step: u64, cfg: &ScheduleConfig) -> f64 {
    if cfg.kind == ScheduleKind::Constant {
        return cfg.max_lr;
    }
    let total = cfg.total_steps as f64;
    let s = (step.min(cfg.total_steps)) as f64;
    let warmup_end = cfg.warmup_ratio * total;
    let hold_end = (cfg.warmup_ratio + cfg.hold_ratio) * total;
    if s < warmup_end {
        cfg.max_lr * s / warmup_end
    } else if s <= hold_end || total <= hold_end {
        cfg.max_lr
    } else {
        let progress = (s - hold_end) / (total - hold_end);
        cfg.max_lr * cfg.final_lr_ratio.powf(progress)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(total: u64) -> ScheduleConfig {
        ScheduleConfig {
            kind: ScheduleKind::WarmupHoldDecay,
            max_lr: 5e-4,
            total_steps: total,
            ..ScheduleConfig::default()
        }
    }

    #[test]
    fn constant_ignores_the_step() {
        let cfg = ScheduleConfig::constant(5e-4, 100);
        for step in [0, 1, 50, 100, 10_000] {
            assert_eq!(lr_at(step, &cfg), 5e-4);
        }
    }

    #[test]
    fn ramp_hits_the_documented_values() {
        let cfg = ramp(25_000);
        assert!((lr_at(2_500, &cfg) - 2.5e-4).abs() < 1e-18);
        assert_eq!(lr_at(5_000, &cfg), 5e-4);
        assert_eq!(lr_at(10_000, &cfg), 5e-4);
        assert_eq!(lr_at(12_500, &cfg), 5e-4);
        assert!((lr_at(25_000, &cfg) - 5e-6).abs() < 1e-18);
    }

    #[test]
    fn warmup_starts_at_zero_and_climbs_linearly() {
        let cfg = ramp(1000);
        assert_eq!(lr_at(0, &cfg), 0.0);
        let quarter = lr_at(50, &cfg);
        let half = lr_at(100, &cfg);
        assert!((2.0 * quarter - half).abs() < 1e-18);
    }

    #[test]
    fn continuous_at_phase_boundaries() {
        let cfg = ramp(25_000);
        let warmup_end = 5_000u64;
        let hold_end = 12_500u64;
        assert!((lr_at(warmup_end - 1, &cfg) - lr_at(warmup_end, &cfg)).abs() < 5e-4 / 4_999.0);
        assert!((lr_at(hold_end, &cfg) - lr_at(hold_end + 1, &cfg)).abs() < 1e-6);
        // exact value at the boundaries themselves
        assert!((lr_at(warmup_end, &cfg) - cfg.max_lr).abs() < 1e-12);
        assert!((lr_at(hold_end, &cfg) - cfg.max_lr).abs() < 1e-12);
    }

    #[test]
    fn decay_is_monotone_and_clamps_past_the_end() {
        let cfg = ramp(1000);
        let mut prev = lr_at(500, &cfg);
        for step in 501..=1000 {
            let lr = lr_at(step, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
        assert_eq!(lr_at(1000, &cfg), lr_at(5000, &cfg));
        assert!((lr_at(1000, &cfg) - 5e-6).abs() < 1e-18);
    }

    #[test]
    fn bad_ratio_sums_are_rejected() {
        let mut cfg = ramp(100);
        cfg.hold_ratio = 0.4;
        assert!(cfg.validate().is_err());
        let mut cfg = ramp(100);
        cfg.max_lr = 0.0;
        assert!(cfg.validate().is_err());
        assert!(ramp(100).validate().is_ok());
    }
}
