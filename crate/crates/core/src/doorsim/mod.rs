//! Synthetic articulated-door domain: kinematics, rendering, the
//! grip/slip reward oracle and datasets.

mod dataset;
mod kinematics;
mod render;
mod simulate;

pub use dataset::{
    generate_dataset, load_dataset, read_dataset, record_bytes, save_dataset, write_dataset,
    Dataset, DatasetHeader, GenConfig, ObjectRecord, DATASET_MAGIC, DATASET_VERSION, HEADER_BYTES,
};
pub use kinematics::{
    sample_candidate_actions, sample_door, Action, DoorKinematics, CANDIDATE_HINGE_RANGE,
    CANDIDATE_RADIUS_RANGE, GOAL_ANGLE_RANGE, HANDLE_FRACTION_RANGE, HINGE_RANGE, WIDTH_RANGE,
};
pub use render::{render, CAMERA_DISTANCE_RANGE, REFERENCE_DISTANCE, WORLD_HALF_EXTENT};
pub use simulate::{execute_action, optimal_reward, GRIP_TOLERANCE, MAX_CATCH_UP, STEP_ANGLE};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{what} {value} out of range")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("invalid door: {0}")]
    InvalidDoor(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("dataset file truncated")]
    Truncated,
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
