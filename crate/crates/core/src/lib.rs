//! Semi-supervised neural processes for predicting the outcome of door-opening
//! actions from images and a handful of labeled interactions.

pub mod action_model;
pub mod context_learner;
pub mod diffcore;
pub mod doorsim;
pub mod evalcli;
pub mod training;
mod error;

pub use error::ModelError;
