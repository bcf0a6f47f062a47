//! Dense arrays with reverse-mode differentiation, a few neural layers,
//! diagonal-Gaussian utilities and the Adam optimizer.

mod adam;
mod array;
mod gaussian;
mod gradcheck;
mod kernels;
pub mod layers;
mod params;
mod rng;
mod tape;

pub use adam::{adam_step, AdamConfig};
pub use array::{kahan_sum, Array};
pub use gaussian::{kl_diag_gaussian, DiagonalGaussian, GaussianVar, LOG_VAR_MAX, LOG_VAR_MIN};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use params::{
    read_checkpoint, write_checkpoint, ParamId, ParameterStore, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: dimensions must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parameter {0:?} already exists")]
    DuplicateParameter(String),
    #[error("parameter {0:?} not found")]
    MissingParameter(String),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
