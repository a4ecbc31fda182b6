//! Warmup plus step-decay learning-rate schedule.

use super::config::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
    pub milestones: Vec<f64>,
    pub factor: f64,
}

impl Schedule {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Schedule {
            base: cfg.base_lr,
            warmup: cfg.warmup_steps,
            total: cfg.steps,
            milestones: cfg.milestones.clone(),
            factor: cfg.lr_decay,
        }
    }

    /// Linear ramp from 0 over `warmup` steps, then ×`factor` from each
    /// milestone step `round(m · total)` on.
    pub fn lr_at(&self, step: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| step >= (m * self.total as f64).round() as usize).count();
        let lr = self.base * self.factor.powi(decays as i32);
        if step < self.warmup {
            lr * step as f64 / self.warmup as f64
        } else {
            lr
        }
    }
}

pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    Schedule::from_config(cfg).lr_at(step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_midpoint() {
        let s = Schedule { base: 0.08, warmup: 500, total: 150_000, milestones: vec![0.7, 0.9], factor: 0.1 };
        assert!((s.lr_at(250) - 0.04).abs() < 1e-15);
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(500), 0.08);
        assert_eq!(s.lr_at(104_999), 0.08);
    }
}
