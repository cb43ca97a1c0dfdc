//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors surfaced by matrix construction, training, and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions are inconsistent.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// Hierarchical partition sizes do not sum to the class count.
    #[error("partition mismatch: {0}")]
    PartitionMismatch(String),
    /// Noise matrix is singular or outside its invertible range.
    #[error("singular noise matrix: {0}")]
    SingularNoise(String),
    /// Class count not supported by this constructor.
    #[error("unsupported class count: {0}")]
    UnsupportedK(String),
    /// A loss evaluated to a non-finite value.
    #[error("non-finite loss: {0}")]
    NonfiniteLoss(String),
    /// Task specification cannot produce a meaningful dataset.
    #[error("degenerate task spec: {0}")]
    DegenerateSpec(String),
    /// Signal too short for feature extraction.
    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),
    /// Per-client class quotas cannot be met by the pool.
    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),
    /// Aggregation weights do not form a valid convex combination.
    #[error("bad aggregation weights: {0}")]
    BadWeights(String),
    /// Gram matrix side exceeds the configured cap.
    #[error("gram matrix too large: {0}")]
    TooLarge(String),
    /// Theoretical contraction factor falls outside (0, 1).
    #[error("invalid convergence rate: {0}")]
    InvalidRate(String),
    /// Eigensolver did not converge.
    #[error("eigensolver failed: {0}")]
    ConvergenceFailure(String),
    /// Experiment configuration failed validation.
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
