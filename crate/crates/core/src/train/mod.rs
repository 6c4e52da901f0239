//! Optimization stack: joint focal objective, decoupled-decay Adam, the
//! epoch loop with early stopping, and batch prediction over an archive.
//!
//! Epoch history is written without wall-clock fields so reruns of the same
//! seed produce byte-identical files; timing lives in [`TrainHistory`] and
//! whatever sidecar the caller chooses.

mod config;
mod loss;
mod optim;
mod run;

pub use config::{LrSchedule, TrainConfig};
pub use loss::{
    build_joint_loss, cross_entropy_value, focal_loss_value, inverse_frequency_alpha,
    joint_loss_value, LossNodes, Objective, PROB_FLOOR,
};
pub use optim::{AdamW, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use run::{
    evaluate, predict, resolve_objective, train, write_history_csv, EpochStats, Predictions,
    SplitEval, TaskStats, TrainHistory, TrainOutcome, HISTORY_COLUMNS,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
