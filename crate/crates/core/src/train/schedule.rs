use serde::{Deserialize, Serialize};

use super::TrainError;

/// Linear warmup followed by cosine decay to a floor of `alpha_f * base_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub t_max: u64,
    /// Final learning rate as a fraction of `base_lr`.
    pub alpha_f: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(TrainError::Config(format!("base_lr must be finite and >= 0, got {}", self.base_lr)));
        }
        if self.warmup_steps >= self.t_max {
            return Err(TrainError::Config(format!(
                "warmup_steps {} must be below t_max {}",
                self.warmup_steps, self.t_max
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha_f) {
            return Err(TrainError::Config(format!("alpha_f must be in [0, 1], got {}", self.alpha_f)));
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` (0-based, counted globally).
    pub fn lr_at(&self, step: u64) -> f64 {
        let (eta, w, t_max, alpha) = (self.base_lr, self.warmup_steps, self.t_max, self.alpha_f);
        if step < w {
            eta * (step + 1) as f64 / w as f64
        } else if step < t_max {
            self.decay_at((step - w) as f64 / (t_max - w) as f64)
        } else {
            eta * alpha
        }
    }

    /// Cosine branch at `progress` in `[0, 1]`.
    fn decay_at(&self, progress: f64) -> f64 {
        let alpha = self.alpha_f;
        self.base_lr * (alpha + (1.0 - alpha) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(base_lr: f64, alpha_f: f64, t_max: u64) -> ScheduleConfig {
        ScheduleConfig { base_lr, warmup_steps: 100, t_max, alpha_f }
    }

    #[test]
    fn boundaries() {
        let s = sched(4.0e-4, 1e-6, 88_000);
        assert!((s.lr_at(88_000) - 4e-10).abs() <= 1e-12 * 4e-10);
        assert_eq!(s.lr_at(100), 4.0e-4);
        let mid = 100 + (88_000 - 100) / 2;
        let expect = 4.0e-4 * (1e-6 + (1.0 - 1e-6) / 2.0);
        assert!((s.lr_at(mid) - expect).abs() < 1e-15);
        assert_eq!(s.lr_at(0), 4.0e-6);
        assert_eq!(s.lr_at(1_000_000), s.lr_at(88_000));
    }

    #[test]
    fn continuity_at_phase_changes() {
        for (eta, a, t) in [(4.0e-4, 1e-6, 88_000), (2.0e-4, 0.1, 24_800), (1.0, 0.5, 1000)] {
            let s = sched(eta, a, t);
            // Warmup meets the cosine branch exactly; the cosine branch's
            // endpoint meets the constant floor.
            assert!((s.lr_at(99) - s.lr_at(100)).abs() < 1e-9);
            assert!((s.decay_at(0.0) - s.lr_at(100)).abs() < 1e-9);
            assert!((s.decay_at(1.0) - s.lr_at(t)).abs() < 1e-9);
            assert!(s.lr_at(t - 1) >= s.lr_at(t));
        }
    }

    #[test]
    fn validation() {
        assert!(sched(1e-3, 0.1, 100).validate().is_err());
        assert!(sched(1e-3, 1.5, 1000).validate().is_err());
        assert!(ScheduleConfig { base_lr: 1e-3, warmup_steps: 0, t_max: 1, alpha_f: 0.0 }.validate().is_ok());
    }
}
