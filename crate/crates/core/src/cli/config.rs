//! Run configuration: one TOML file covering generation, preprocessing,
//! architecture, training, and output locations.
//!
//! A single root seed drives every stage through named RNG substreams, so
//! `seed` here (or `--seed` on the command line) is the only knob needed to
//! reproduce a whole run. The per-section seeds inside `[generator]` and
//! `[train]` are overwritten with the root seed during resolution.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::numerics::Precision;
use crate::signal::SplitFractions;
use crate::synth::GeneratorProfile;
use crate::train::TrainConfig;

use super::CliError;

/// Where each command writes by default; `--out` overrides the active
/// command's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub raw_dir: PathBuf,
    pub archive_dir: PathBuf,
    pub train_dir: PathBuf,
    pub eval_dir: PathBuf,
    pub explain_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            raw_dir: "data/raw".into(),
            archive_dir: "data/archive".into(),
            train_dir: "runs/train".into(),
            eval_dir: "runs/eval".into(),
            explain_dir: "runs/explain".into(),
        }
    }
}

/// Scalar fields come before the sections so the file serializes cleanly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed for every stage.
    pub seed: u64,
    /// Element type for training. Evaluation and explanation read the
    /// checkpoint's own precision; setting this there only asserts it.
    pub precision: Option<Precision>,
    /// Train/val/test subject fractions.
    pub split_fractions: Option<SplitFractions>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generator: GeneratorProfile,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<RunConfig, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Pushes the root seed into every section and checks each one.
    pub fn resolve(&mut self, seed_flag: Option<u64>, precision_flag: Option<Precision>) {
        if let Some(seed) = seed_flag {
            self.seed = seed;
        }
        if precision_flag.is_some() {
            self.precision = precision_flag;
        }
        self.generator.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.generator
            .validate()
            .map_err(|e| CliError::Config(format!("invalid generator profile: {e}")))?;
        if let Some((t, v, e)) = self.split_fractions {
            let sum = t + v + e;
            if !(t >= 0.0 && v >= 0.0 && e >= 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(CliError::Config(format!(
                    "split_fractions [{t}, {v}, {e}] must be nonnegative and sum to 1"
                )));
            }
        }
        Ok(())
    }

    pub fn train_precision(&self) -> Precision {
        self.precision.unwrap_or(Precision::F32)
    }

    /// Records the exact configuration a command ran with.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CliError::Config(format!("config serialization failed: {e}")))?;
        fs::write(out_dir.join("resolved_config.toml"), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.precision, None);
        assert_eq!(cfg.paths.raw_dir, PathBuf::from("data/raw"));
        cfg.validate().unwrap();
    }

    #[test]
    fn sections_merge_and_unknown_keys_fail() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 9
            precision = "f64"
            split_fractions = [0.5, 0.25, 0.25]

            [model]
            d_model = 48
            n_heads = 4

            [train]
            epochs = 3

            [generator]
            n_subjects = 5

            [paths]
            raw_dir = "elsewhere/raw"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.precision, Some(Precision::F64));
        assert_eq!(cfg.model.d_model, 48);
        assert_eq!(cfg.model.n_layers, ModelConfig::default().n_layers);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.generator.n_subjects, 5);
        assert_eq!(cfg.paths.raw_dir, PathBuf::from("elsewhere/raw"));

        assert!(toml::from_str::<RunConfig>("unknown_knob = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[model]\nwidth = 3").is_err());
    }

    #[test]
    fn resolve_pushes_the_root_seed_down() {
        let mut cfg: RunConfig =
            toml::from_str("seed = 4\n[train]\nseed = 99\n[generator]\nseed = 98").unwrap();
        cfg.resolve(None, None);
        assert_eq!((cfg.seed, cfg.train.seed, cfg.generator.seed), (4, 4, 4));

        cfg.resolve(Some(11), Some(Precision::F64));
        assert_eq!((cfg.seed, cfg.train.seed, cfg.generator.seed), (11, 11, 11));
        assert_eq!(cfg.precision, Some(Precision::F64));
    }

    #[test]
    fn bad_split_fractions_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.split_fractions = Some((0.5, 0.2, 0.2));
        assert!(cfg.validate().is_err());
        cfg.split_fractions = Some((0.8, 0.1, 0.1));
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.seed = 77;
        cfg.precision = Some(Precision::F32);
        cfg.split_fractions = Some((0.6, 0.2, 0.2));
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
