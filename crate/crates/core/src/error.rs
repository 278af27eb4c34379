//! Shared error type for the whole crate.

use thiserror::Error;

/// Errors surfaced by tensor arithmetic, geometry, losses, data synthesis
/// and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes (broadcasting, matmul inner dims, non-scalar root).
    #[error("shape error: {0}")]
    Shape(String),

    /// A value left the domain of an operation (non-finite result, arccosh
    /// argument below the clamp band, non-finite probe in a gradient check).
    #[error("domain error: {0}")]
    Domain(String),

    /// A vector claimed to lie on the hyperboloid does not satisfy the
    /// constraint within tolerance.
    #[error("manifold error: {0}")]
    Manifold(String),

    /// Entailment cone requested at the exact origin, where the half-aperture
    /// is undefined.
    #[error("cone undefined at origin: {0}")]
    OriginCone(String),

    /// Exterior angle requested for a coincident pair of points.
    #[error("degenerate pair: {0}")]
    DegeneratePair(String),

    /// Contrastive loss needs at least two pairs.
    #[error("batch too small: {0}")]
    BatchTooSmall(String),

    /// A dataset split would leave no training leaves.
    #[error("split error: {0}")]
    Split(String),

    /// Optimizer received a non-finite gradient; carries the parameter name.
    #[error("optimizer error: {0}")]
    Optim(String),

    /// Checkpoint is malformed, truncated, corrupted or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
