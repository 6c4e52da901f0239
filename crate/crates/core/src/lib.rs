//! Multitask 1D vision transformer for sleep analysis on wearable biosignals.
//!
//! The crate covers the full path from raw four-channel recordings (PPG plus
//! three respiratory effort channels) to per-epoch predictions:
//!
//! ```text
//!   raw 512 Hz recordings
//!     -> 30 s segmentation -> 64 Hz resampling -> per-subject z-score
//!     -> dataset archive (f32 tensors + labels + manifest)
//!     -> patch embedding -> transformer encoder -> two softmax heads
//!        (5 sleep stages, 4 apnea classes)
//!     -> metrics, attention-based explanations
//! ```
//!
//! Everything model-related is built on [`numerics`], a small reverse-mode
//! autodiff tape over `ndarray` tensors that works in either `f32` or `f64`.
//! A synthetic cohort generator ([`synth`]) produces labeled recordings with
//! controllable morphology so the whole stack can be exercised end to end
//! without clinical data.

pub mod cli;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod signal;
pub mod synth;
pub mod train;

pub use model::{ModelConfig, ModelParams};
pub use signal::{ApneaLabel, Channel, Disorder, SignalRecord, SleepStage};
pub use synth::GeneratorProfile;
pub use train::TrainConfig;
