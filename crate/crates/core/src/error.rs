//! Error type shared across the crate.

use thiserror::Error;

/// Errors from model construction, simulation, quantization and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("model definition error: {0}")]
    ModelDefinition(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate observation: Bayes normalizer {normalizer:e} below underflow threshold (density lower bound violated at this state)")]
    DegenerateObservation { normalizer: f64 },

    #[error("rejection sampling failed to accept within {cap} proposals (near-zero normalizer)")]
    RejectionCapExceeded { cap: usize },

    #[error("initial hidden point is not a grid point; quantize the reference measure with the initial state pinned")]
    MissingInitialPoint,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("combinatorial size cap exceeded: {0}")]
    SizeCapExceeded(String),

    #[error("missing upstream artifact for stage {stage}: {path}")]
    MissingArtifact { stage: String, path: String },

    #[error("artifact format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
