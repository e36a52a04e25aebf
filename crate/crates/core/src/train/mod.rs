//! Loss, optimizer, schedule, epoch loop and the leave-one-out and
//! ablation protocols.

mod config;
mod loss;
mod optim;
mod protocol;
mod trainer;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{SourceSplits, TrainConfig};
pub use loss::{cross_entropy, one_hot, LOG_FLOOR};
pub use optim::{lr_at, AdamW};
pub use protocol::{
    preset_grid, run_ablation_matrix, run_leave_one_out, run_single, AblationResult, AblationRow, EpochRecord,
    ablation_csv, ablation_table, features_csv, metrics_csv, write_run_outputs, LooReport, OutputDir, ProtocolRun, GRIDS,
};
pub use trainer::{evaluate, train_epoch, Classifier, EpochStats, EvalResult, FeatureRow, Prediction};

use crate::data::DataError;
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),
    #[error("loss became non-finite at epoch {epoch}, batch {batch}; last batch: {samples:?}")]
    NonFiniteLoss { epoch: usize, batch: usize, samples: Vec<String> },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl TrainError {
    /// Configuration and validation problems, as opposed to failures while
    /// running.
    pub fn is_validation(&self) -> bool {
        matches!(self, TrainError::Config(_) | TrainError::Argument(_))
            || matches!(self, TrainError::Model(ModelError::Config(_)))
    }
}
