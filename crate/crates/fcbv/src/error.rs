//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the simulator, networks, and pipeline stages.
#[derive(Debug, Error)]
pub enum FcbvError {
    /// A caller violated an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A feature row had (near-)zero norm and cannot be normalized.
    #[error("degenerate feature row at index {0}")]
    DegenerateFeature(usize),

    /// The integrator produced non-finite state or failed to settle.
    #[error("simulation divergence: {0}")]
    SimulationDivergence(String),

    /// A grasp point was farther than the snap radius from every vertex.
    #[error("grasp miss: point ({0:.4}, {1:.4}, {2:.4}) is farther than {3} m from any vertex")]
    GraspMiss(f64, f64, f64, f64),

    /// Every point of an arm's reachable set was masked out.
    #[error("no reachable candidate for arm {arm}")]
    NoReachableCandidate { arm: usize },

    /// Training produced a non-finite loss.
    #[error("training divergence at step {step}: {detail}")]
    TrainingDivergence { step: usize, detail: String },

    /// A frozen-parameter contract was violated.
    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// Configuration file or override rejected.
    #[error("configuration error at `{key}`: {detail}")]
    Config { key: String, detail: String },

    /// Array container or checkpoint file is malformed.
    #[error("malformed container: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FcbvError {
    pub fn invalid<S: Into<String>>(msg: S) -> Self {
        FcbvError::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, FcbvError>;
