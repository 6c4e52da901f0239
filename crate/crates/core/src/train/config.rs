use serde::{Deserialize, Serialize};

use super::TrainError;

/// Learning-rate shape over the warmup window. After `warmup_epochs` both
/// variants sit at `lr_after_warmup`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Constant `lr_initial`, then a hard drop.
    Step,
    /// Linear interpolation from `lr_initial` down across the window.
    LinearRamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_after_warmup: f64,
    pub warmup_epochs: usize,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub focal_gamma: f64,
    /// Per-class focal weights for the stage task. Derived from inverse
    /// class frequency on the training split when absent.
    pub focal_alpha_stage: Option<Vec<f64>>,
    pub focal_alpha_apnea: Option<Vec<f64>>,
    /// (stage, apnea) weights in the joint objective.
    pub task_weights: (f64, f64),
    /// Epochs without a validation improvement before stopping. 0 disables
    /// early stopping entirely.
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Stop once training accuracy on both tasks reaches this value.
    pub target_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 45,
            batch_size: 64,
            lr_initial: 1e-4,
            lr_after_warmup: 1e-5,
            warmup_epochs: 15,
            lr_schedule: LrSchedule::Step,
            weight_decay: 0.01,
            focal_gamma: 2.0,
            focal_alpha_stage: None,
            focal_alpha_apnea: None,
            task_weights: (1.0, 1.0),
            early_stop_patience: 10,
            seed: 0,
            target_train_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        for (name, v) in [
            ("lr_initial", self.lr_initial),
            ("lr_after_warmup", self.lr_after_warmup),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return fail(format!("{name} must be a positive finite number, got {v}"));
            }
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return fail(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !self.focal_gamma.is_finite() || self.focal_gamma < 0.0 {
            return fail(format!("focal_gamma must be nonnegative, got {}", self.focal_gamma));
        }
        for (name, alpha) in [
            ("focal_alpha_stage", &self.focal_alpha_stage),
            ("focal_alpha_apnea", &self.focal_alpha_apnea),
        ] {
            if let Some(alpha) = alpha {
                if alpha.is_empty() || alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
                    return fail(format!("{name} entries must be nonnegative finite numbers"));
                }
                if alpha.iter().all(|&a| a == 0.0) {
                    return fail(format!("{name} must have at least one positive entry"));
                }
            }
        }
        let (ws, wa) = self.task_weights;
        if !ws.is_finite() || !wa.is_finite() || ws < 0.0 || wa < 0.0 || ws + wa == 0.0 {
            return fail(format!("task_weights ({ws}, {wa}) must be nonnegative with a positive sum"));
        }
        if let Some(t) = self.target_train_accuracy {
            if !t.is_finite() || t <= 0.0 || t > 1.0 {
                return fail(format!("target_train_accuracy must lie in (0, 1], got {t}"));
            }
        }
        Ok(())
    }

    /// Learning rate for a 0-indexed epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.warmup_epochs {
            return self.lr_after_warmup;
        }
        match self.lr_schedule {
            LrSchedule::Step => self.lr_initial,
            LrSchedule::LinearRamp => {
                let f = epoch as f64 / self.warmup_epochs as f64;
                self.lr_initial + (self.lr_after_warmup - self.lr_initial) * f
            }
        }
    }
}
