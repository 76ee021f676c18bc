use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CompError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CompError {
    #[error("infeasible missing rate {mr}: must lie in [0, {max}] for {modalities} modalities")]
    InfeasibleMissingRate { mr: f64, max: f64, modalities: usize },

    #[error("corrupt dataset at {path}: {reason}")]
    CorruptDataset { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("plot error: {0}")]
    Plot(String),
}

impl CompError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CompError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failure at run time.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CompError::InfeasibleMissingRate { .. }
                | CompError::Config(_)
                | CompError::Validation(_)
                | CompError::Shape(_)
                | CompError::CorruptDataset { .. }
                | CompError::Checkpoint(_)
        )
    }
}
