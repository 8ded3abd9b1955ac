//! Slanted triangular learning-rate schedule with per-group base rates:
//! linear warm-up to the base rate over `warmup_steps`, then linear decay to
//! zero at `total_steps`. The three parameter groups (sparse encoder, hidden
//! layer, output layer) share the triangular shape and differ only in their
//! base rates.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("base learning rate {0} is not positive")]
    NonPositiveBaseRate(f64),
    #[error("total steps ({total}) must exceed warm-up steps ({warmup})")]
    TotalNotAboveWarmup { total: u64, warmup: u64 },
    #[error("step {t} is beyond the schedule end {total}")]
    StepBeyondTotal { t: u64, total: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlantedTriangular {
    eta0: f64,
    warmup_steps: u64,
    total_steps: u64,
}

impl SlantedTriangular {
    pub fn new(eta0: f64, warmup_steps: u64, total_steps: u64) -> Result<Self, ScheduleError> {
        if eta0 <= 0.0 {
            return Err(ScheduleError::NonPositiveBaseRate(eta0));
        }
        if total_steps <= warmup_steps {
            return Err(ScheduleError::TotalNotAboveWarmup {
                total: total_steps,
                warmup: warmup_steps,
            });
        }
        Ok(SlantedTriangular {
            eta0,
            warmup_steps,
            total_steps,
        })
    }

    pub fn eta0(&self) -> f64 {
        self.eta0
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup_steps
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    /// The triangular shape at step `t`, scaled so the peak is 1. With zero
    /// warm-up the rising branch is skipped entirely (it would be 0/0) and
    /// the schedule starts at its peak.
    pub fn shape_at(&self, t: u64) -> Result<f64, ScheduleError> {
        if t > self.total_steps {
            return Err(ScheduleError::StepBeyondTotal {
                t,
                total: self.total_steps,
            });
        }
        if self.warmup_steps > 0 && t <= self.warmup_steps {
            Ok(t as f64 / self.warmup_steps as f64)
        } else {
            Ok((self.total_steps - t) as f64 / (self.total_steps - self.warmup_steps) as f64)
        }
    }

    /// Learning rate at step `t` (optimizer steps, counted from 0).
    pub fn lr_at(&self, t: u64) -> Result<f64, ScheduleError> {
        Ok(self.eta0 * self.shape_at(t)?)
    }
}

/// Base learning rates for the three parameter groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub eta_x: f64,
    pub eta_h: f64,
    pub eta_a: f64,
}

impl GroupRates {
    pub fn new(eta_x: f64, eta_h: f64, eta_a: f64) -> Result<Self, ScheduleError> {
        for &r in &[eta_x, eta_h, eta_a] {
            if r <= 0.0 {
                return Err(ScheduleError::NonPositiveBaseRate(r));
            }
        }
        Ok(GroupRates { eta_x, eta_h, eta_a })
    }
}

/// Per-group learning rates at step `t`: every group's base rate scaled by
/// the same triangular shape factor.
pub fn group_lr(
    rates: &GroupRates,
    shape: &SlantedTriangular,
    t: u64,
) -> Result<(f64, f64, f64), ScheduleError> {
    let factor = shape.shape_at(t)?;
    Ok((
        rates.eta_x * factor,
        rates.eta_h * factor,
        rates.eta_a * factor,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_midpoint_and_decay_midpoint() {
        let s = SlantedTriangular::new(2e-3, 100, 1_000).unwrap();
        assert!((s.lr_at(50).unwrap() - 1e-3).abs() < 1e-18);
        // 2e-3 * 450 / 900
        assert!((s.lr_at(550).unwrap() - 1e-3).abs() < 1e-18);
    }

    #[test]
    fn boundaries_are_continuous() {
        let s = SlantedTriangular::new(2e-3, 100, 1_000).unwrap();
        assert_eq!(s.lr_at(100).unwrap(), 2e-3);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(1_000).unwrap(), 0.0);
        // Immediately around the peak the rate stays near eta0.
        assert!(s.lr_at(99).unwrap() < 2e-3);
        assert!(s.lr_at(101).unwrap() < 2e-3);
        assert!(s.lr_at(99).unwrap() > 1.9e-3);
        assert!(s.lr_at(101).unwrap() > 1.9e-3);
    }

    #[test]
    fn zero_warmup_starts_at_peak() {
        let s = SlantedTriangular::new(1e-3, 0, 500).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 1e-3);
        assert!((s.lr_at(250).unwrap() - 5e-4).abs() < 1e-18);
        assert_eq!(s.lr_at(500).unwrap(), 0.0);
    }

    #[test]
    fn each_branch_is_affine() {
        let s = SlantedTriangular::new(1.0, 100, 1_000).unwrap();
        for window in [[10u64, 20, 30], [200, 300, 400]] {
            let v: Vec<f64> = window.iter().map(|&t| s.lr_at(t).unwrap()).collect();
            let second_diff = (v[2] - v[1]) - (v[1] - v[0]);
            assert!(second_diff.abs() < 1e-12, "branch not affine: {second_diff}");
        }
    }

    #[test]
    fn step_beyond_total_is_error() {
        let s = SlantedTriangular::new(1.0, 0, 10).unwrap();
        assert!(matches!(
            s.lr_at(11),
            Err(ScheduleError::StepBeyondTotal { t: 11, total: 10 })
        ));
    }

    #[test]
    fn invalid_constructions() {
        assert!(SlantedTriangular::new(0.0, 0, 10).is_err());
        assert!(SlantedTriangular::new(1.0, 10, 10).is_err());
        assert!(GroupRates::new(1e-5, 0.0, 1e-3).is_err());
    }

    #[test]
    fn group_rates_pass_through_at_peak() {
        let rates = GroupRates::new(1e-5, 1e-4, 1e-3).unwrap();
        let s = SlantedTriangular::new(1e-3, 0, 100).unwrap();
        assert_eq!(group_lr(&rates, &s, 0).unwrap(), (1e-5, 1e-4, 1e-3));
        assert_eq!(group_lr(&rates, &s, 100).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn group_ratios_are_step_invariant() {
        let rates = GroupRates::new(5e-5, 1e-4, 2e-3).unwrap();
        let s = SlantedTriangular::new(2e-3, 50, 400).unwrap();
        for t in [1, 25, 50, 199, 399] {
            let (x, h, a) = group_lr(&rates, &s, t).unwrap();
            assert!((a / x - 40.0).abs() < 1e-9, "ratio drift at t={t}");
            assert!((h / x - 2.0).abs() < 1e-9);
        }
    }
}
