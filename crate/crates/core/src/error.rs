use thiserror::Error;

use crate::diffcore::DiffError;

/// Errors from building or evaluating the learned models.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{0} must not be empty")]
    EmptySet(&'static str),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
}
