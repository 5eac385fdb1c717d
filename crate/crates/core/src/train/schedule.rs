//! Warmup followed by cosine annealing with warm restarts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub warmup_epochs: f64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub cycle_epochs: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            warmup_epochs: 5.0,
            lr_start: 1e-6,
            lr_peak: 3e-4,
            lr_floor: 1e-6,
            cycle_epochs: 50.0,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.warmup_epochs >= 0.0
            && self.cycle_epochs > 0.0
            && self.lr_start >= 0.0
            && self.lr_floor >= 0.0
            && self.lr_peak >= self.lr_floor.max(self.lr_start);
        if !ok {
            return Err(Error::Config(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }

    /// Learning rate at a (possibly fractional) epoch.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        let e = epoch.max(0.0);
        if e < self.warmup_epochs {
            return self.lr_start + (self.lr_peak - self.lr_start) * e / self.warmup_epochs;
        }
        let c = (e - self.warmup_epochs).rem_euclid(self.cycle_epochs) / self.cycle_epochs;
        self.lr_floor + (self.lr_peak - self.lr_floor) * (1.0 + (std::f64::consts::PI * c).cos()) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_points() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0.0), 1e-6);
        assert_eq!(s.lr_at(5.0), 3e-4);
        assert!((s.lr_at(30.0) - 1.505e-4).abs() < 1e-12);
        assert!((s.lr_at(55.0) - 3e-4).abs() < 1e-18);
        assert!((s.lr_at(54.999_999) - 1e-6).abs() < 1e-12);
    }
}
