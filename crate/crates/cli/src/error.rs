//! Error classes and their process exit codes.

use btsf_core::data::DataError;
use btsf_core::eval::EvalError;
use btsf_core::model::ModelError;
use btsf_core::train::{CheckpointError, TrainError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: config, dataset or arguments. Exit code 2.
    #[error("{0}")]
    Input(String),
    /// Non-finite values or failed gradient verification. Exit code 3.
    #[error("{0}")]
    Numeric(String),
    /// Checkpoint incompatible with the build or the dataset. Exit code 4.
    #[error("{0}")]
    Compatibility(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Compatibility(_) => 4,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Input(format!("{}: {e}", path.display()))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::VersionMismatch(_) => CliError::Compatibility(e.to_string()),
            CheckpointError::Io { .. } | CheckpointError::CorruptFile(_) => CliError::Input(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. }
            | TrainError::NonFiniteGradient { .. }
            | TrainError::NonFinitePerturbation(_) => CliError::Numeric(e.to_string()),
            TrainError::Checkpoint(c) => c.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::Singular(_) => CliError::Numeric(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}
