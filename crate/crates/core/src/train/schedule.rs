//! Learning-rate schedule: linear warmup, cosine decay to a floor, then a
//! constant cooldown at the floor.

use std::f64::consts::PI;

use crate::config::TrainSection;

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub cooldown_epochs: usize,
    pub peak: f64,
    pub floor: f64,
}

impl Schedule {
    pub fn from_config(t: &TrainSection) -> Self {
        Schedule {
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            cooldown_epochs: t.cooldown_epochs,
            peak: t.peak_lr,
            floor: t.peak_lr * t.floor_ratio,
        }
    }

    /// Rate at a possibly fractional epoch (training steps use
    /// `epoch + step / steps_per_epoch`).
    pub fn lr_at(&self, epoch: f64) -> f64 {
        let warmup = self.warmup_epochs as f64;
        let cosine_end = self.epochs.saturating_sub(self.cooldown_epochs) as f64;
        if epoch < warmup {
            return self.peak * epoch.max(0.0) / warmup;
        }
        if epoch >= cosine_end {
            return self.floor;
        }
        let t = (epoch - warmup) / (cosine_end - warmup);
        self.floor + (self.peak - self.floor) * 0.5 * (1.0 + (PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    #[test]
    fn default_schedule_points() {
        let s = Schedule::from_config(&Config::default().train);
        assert_eq!(s.lr_at(0.0), 0.0);
        assert_eq!(s.lr_at(5.0), 5e-4);
        assert_eq!(s.lr_at(2.5), 2.5e-4);
        // cosine span is [5, 90)
        let mid = s.lr_at(47.5);
        assert!((mid - (s.peak + s.floor) / 2.0).abs() < 1e-15);
        for e in 90..100 {
            assert_eq!(s.lr_at(e as f64), s.floor);
        }
    }
}
