//! Filesystem and command layer over `mtln-core`: PGM images, CSV
//! manifests and reports, JSON run configuration, checkpoint files, and
//! the pipeline commands behind the `mtln` binary.

pub mod checkpoint_io;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod manifest;
pub mod pgm;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Malformed file content (PGM, CSV, checkpoint container).
    #[error("{0}")]
    Format(String),
    /// Invalid run configuration or command arguments.
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] mtln_core::data::DataError),
    #[error(transparent)]
    Geom(#[from] mtln_core::ellipse::GeomError),
    #[error(transparent)]
    Metrics(#[from] mtln_core::metrics::MetricsError),
    #[error(transparent)]
    Train(#[from] mtln_core::train::TrainError),
    #[error(transparent)]
    Checkpoint(#[from] mtln_core::train::CheckpointError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// Process exit code: 2 for configuration problems, 3 for runtime
    /// divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use mtln_core::train::TrainError;
        match self {
            CliError::Config(_) => 2,
            CliError::Train(TrainError::BadConfig(_)) => 2,
            CliError::Train(TrainError::Loss(mtln_core::loss::LossError::BadConfig(_))) => 2,
            CliError::Train(TrainError::Nn(mtln_core::nn::NnError::BadConfig(_))) => 2,
            CliError::Train(TrainError::NanLoss { .. }) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
