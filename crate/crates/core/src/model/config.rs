//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Network shape. Defaults give the full-size model; tests shrink it.
///
/// All widths are in elements, not bytes. `mlp_hidden` is the encoder
/// feed-forward width; `head_hidden` the width of the two shared head layers;
/// `branch_hidden` the hidden width of each task branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub patch_kernel: usize,
    pub patch_stride: usize,
    pub input_channels: usize,
    pub input_length: usize,
    pub head_hidden: usize,
    pub branch_hidden: usize,
    pub n_stage_classes: usize,
    pub n_apnea_classes: usize,
    pub dropout_rate: f64,
    pub stochastic_depth_survival: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 768,
            n_layers: 6,
            n_heads: 6,
            mlp_hidden: 256,
            patch_kernel: 20,
            patch_stride: 20,
            input_channels: 4,
            input_length: 1920,
            head_hidden: 1024,
            branch_hidden: 256,
            n_stage_classes: 5,
            n_apnea_classes: 4,
            dropout_rate: 0.1,
            stochastic_depth_survival: 0.9,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("mlp_hidden", self.mlp_hidden),
            ("patch_kernel", self.patch_kernel),
            ("patch_stride", self.patch_stride),
            ("input_channels", self.input_channels),
            ("head_hidden", self.head_hidden),
            ("branch_hidden", self.branch_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "indivisible d_model: {} does not split over {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.input_length < self.patch_kernel {
            return Err(ModelError::InvalidConfig(format!(
                "input_length {} shorter than patch_kernel {}",
                self.input_length, self.patch_kernel
            )));
        }
        if self.n_stage_classes < 2 || self.n_apnea_classes < 2 {
            return Err(ModelError::InvalidConfig(
                "each task needs at least two classes".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.stochastic_depth_survival > 0.0 && self.stochastic_depth_survival <= 1.0) {
            return Err(ModelError::InvalidConfig(format!(
                "stochastic_depth_survival {} outside (0, 1]",
                self.stochastic_depth_survival
            )));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.input_length - self.patch_kernel) / self.patch_stride + 1
    }

    /// Patches plus the class token.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form learnable parameter count. Kept independent of the actual
    /// tensor allocation so the two can cross-check each other.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let patch = d * self.input_channels * self.patch_kernel + d;
        let embed = d + self.n_tokens() * d;
        let attn = 4 * (d * d + d);
        let norms = 2 * 2 * d;
        let ffn = d * self.mlp_hidden + self.mlp_hidden + self.mlp_hidden * d + d;
        let head = d * self.head_hidden
            + self.head_hidden
            + self.head_hidden * self.head_hidden
            + self.head_hidden;
        let branch = |classes: usize| {
            self.head_hidden * self.branch_hidden
                + self.branch_hidden
                + self.branch_hidden * classes
                + classes
        };
        patch
            + embed
            + self.n_layers * (attn + norms + ffn)
            + head
            + branch(self.n_stage_classes)
            + branch(self.n_apnea_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.n_patches(), 96);
        assert_eq!(c.n_tokens(), 97);
        assert_eq!(c.head_dim(), 128);
    }

    #[test]
    fn default_param_count() {
        assert_eq!(ModelConfig::default().param_count(), 19_059_721);
    }

    #[test]
    fn head_count_must_divide_width() {
        let c = ModelConfig { d_model: 6, n_heads: 4, ..ModelConfig::default() };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("indivisible d_model"), "{err}");
    }

    #[test]
    fn probability_fields_bounded() {
        let c = ModelConfig { dropout_rate: 1.0, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { stochastic_depth_survival: 0.0, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { stochastic_depth_survival: 1.0, ..ModelConfig::default() };
        assert!(c.validate().is_ok());
    }

    #[test]
    fn serde_fills_defaults_and_rejects_unknown_keys() {
        let c: ModelConfig = serde_json::from_str("{\"d_model\": 32, \"n_heads\": 4}").unwrap();
        assert_eq!(c.d_model, 32);
        assert_eq!(c.n_layers, 6);
        assert!(serde_json::from_str::<ModelConfig>("{\"d_modle\": 32}").is_err());
    }

    #[test]
    fn short_input_rejected() {
        let c = ModelConfig { input_length: 10, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }
}
