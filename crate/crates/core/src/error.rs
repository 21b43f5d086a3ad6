use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, M2ganError>;

#[derive(Debug, Error)]
pub enum M2ganError {
    /// A component was configured with incompatible sizes or options.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called with inputs violating its contract.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value in {component} (layer {layer})")]
    Numeric { component: String, layer: usize },

    #[error("non-finite {component} loss at step {step}")]
    NonFiniteLoss { component: String, step: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("segmenter failed at stage {stage}: {source}")]
    Segmenter {
        stage: usize,
        #[source]
        source: Box<M2ganError>,
    },

    /// Problems with externally supplied files (label maps, images).
    #[error("ingestion error in {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("validation failed: {reason}: {}", ids.join(", "))]
    Validation { reason: String, ids: Vec<String> },

    #[error("incompatible checkpoint format: found version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("corrupt archive: {0}")]
    Archive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl M2ganError {
    /// True for errors caused by user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            M2ganError::Config(_)
                | M2ganError::Precondition(_)
                | M2ganError::Ingestion { .. }
                | M2ganError::Validation { .. }
                | M2ganError::Version { .. }
        )
    }
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(M2ganError::Config(msg.into()))
}

pub(crate) fn precondition<T>(msg: impl Into<String>) -> Result<T> {
    Err(M2ganError::Precondition(msg.into()))
}
