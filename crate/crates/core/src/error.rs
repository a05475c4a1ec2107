use thiserror::Error;

use crate::model::ValidationReport;

#[derive(Debug, Error)]
pub enum DlfmError {
    #[error("invalid model: {0}")]
    Validation(ValidationReport),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("subsolver failed for factor {factor}: {reason}")]
    SubsolverFailure { factor: usize, reason: String },

    #[error("restart {restart}, iteration {iteration}: {source}")]
    RunFailure {
        restart: usize,
        iteration: usize,
        #[source]
        source: Box<DlfmError>,
    },

    #[error("instance too large for enumeration: {0}")]
    InstanceTooLarge(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, DlfmError>;
