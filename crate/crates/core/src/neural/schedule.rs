//! Per-epoch learning-rate schedule: linear warmup, one long cosine decay,
//! then periodic warm restarts that decay back to the floor.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    pub initial_decay_epochs: usize,
    pub min_decay_lr: f64,
    pub restart_interval: usize,
    pub restart_lr: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: 0.01,
            warmup_epochs: 40,
            warmup_start_lr: 0.001,
            initial_decay_epochs: 100,
            min_decay_lr: 0.0001,
            restart_interval: 30,
            restart_lr: 0.001,
        }
    }
}

fn cosine(from: f64, to: f64, pos: f64, len: f64) -> f64 {
    to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * pos / len).cos())
}

impl LrSchedule {
    /// Constant learning rate.
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            base_lr: lr,
            warmup_epochs: 0,
            warmup_start_lr: lr,
            initial_decay_epochs: 0,
            min_decay_lr: lr,
            restart_interval: 1,
            restart_lr: lr,
        }
    }

    pub fn validate(&self) -> crate::error::Result<()> {
        let ok = self.base_lr >= 0.0
            && self.warmup_start_lr >= 0.0
            && self.min_decay_lr >= 0.0
            && self.restart_lr >= 0.0
            && self.restart_interval >= 1
            && self.warmup_start_lr <= self.base_lr
            && self.min_decay_lr <= self.restart_lr;
        if ok {
            Ok(())
        } else {
            Err(crate::error::Error::Config(format!("invalid learning-rate schedule {self:?}")))
        }
    }

    /// Learning rate for `epoch` (0-based).
    ///
    /// Epochs `[0, W)` warm up linearly from `warmup_start_lr`; epochs
    /// `[W, W + D]` follow a half cosine from `base_lr` to `min_decay_lr`;
    /// from `W + D + 1` on, every `restart_interval` epochs restart at
    /// `restart_lr` and decay towards `min_decay_lr`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let w = self.warmup_epochs;
        let d = self.initial_decay_epochs;
        if epoch < w {
            let f = epoch as f64 / w as f64;
            return self.warmup_start_lr + (self.base_lr - self.warmup_start_lr) * f;
        }
        if epoch <= w + d {
            if d == 0 {
                return self.base_lr;
            }
            return cosine(self.base_lr, self.min_decay_lr, (epoch - w) as f64, d as f64);
        }
        let r = self.restart_interval;
        let pos = (epoch - w - d - 1) % r;
        cosine(self.restart_lr, self.min_decay_lr, pos as f64, r as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_values() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 0.001);
        assert_eq!(s.lr_at(40), 0.01);
        assert!((s.lr_at(140) - 0.0001).abs() < 1e-15);
        assert_eq!(s.lr_at(141), 0.001);
        assert_eq!(s.lr_at(171), 0.001);
        assert_eq!(s.lr_at(201), 0.001);
        // half-way through the long decay
        assert!((s.lr_at(90) - (0.0001 + 0.0099 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn warmup_joins_decay_continuously() {
        let s = LrSchedule::default();
        let step = (s.base_lr - s.warmup_start_lr) / s.warmup_epochs as f64;
        assert!((s.lr_at(40) - s.lr_at(39) - step).abs() < 1e-12);
        assert!((s.lr_at(41) - s.lr_at(40)).abs() < 1e-5);
        // monotone non-increasing during decay
        for e in 40..140 {
            assert!(s.lr_at(e + 1) <= s.lr_at(e));
        }
        for e in 141..400 {
            let lr = s.lr_at(e);
            assert!(lr >= s.min_decay_lr && lr <= s.restart_lr);
        }
    }
}
