//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point cloud is empty")]
    EmptyPointCloud,

    #[error("patch has no neighbors (center index {center}, radius {radius})")]
    EmptyPatch { center: usize, radius: f64 },

    #[error("matrix is not a rotation: {0}")]
    InvalidRotation(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("descriptor set is empty")]
    EmptyDescriptorSet,

    #[error("pooled feature is (numerically) zero, descriptor undefined")]
    DegenerateDescriptor,

    #[error("negative set is empty")]
    EmptyNegatives,

    #[error("quaternion has zero norm")]
    ZeroQuaternion,

    #[error("no regressor weights loaded; use the coarse rotation instead")]
    MissingRegressor,

    #[error("need at least {needed} correspondences for mode {mode}, got {got}")]
    InsufficientCorrespondences {
        mode: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("weights file: {0}")]
    WeightsFormat(String),

    #[error("ply: {0}")]
    PlyFormat(String),

    #[error("config: {0}")]
    Config(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("infeasible synthesis request: {0}")]
    InfeasibleSynth(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
