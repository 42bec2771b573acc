//! Crate-wide error type.
//!
//! Every fallible operation in the crate returns [`enum@Error`]; the variants
//! mirror the failure modes of the pipeline stages (tensor shape mismatches,
//! degenerate masks, malformed datasets, ...) so callers can match on the
//! condition they care about without stringly-typed inspection.

use thiserror::Error;

/// Unified error enum for all pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are inconsistent with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A NaN or infinity appeared where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A shape could not be placed without overlap within the retry budget.
    #[error("placement failed: {0}")]
    Placement(String),

    /// A dataset directory or file does not follow the on-disk format.
    #[error("format error: {0}")]
    Format(String),

    /// Underlying filesystem failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// The dataset is too small for the requested episode or protocol.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// An input is degenerate (e.g. an image with near-zero total intensity).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A size is not divisible by the requested pooling factor.
    #[error("divisibility error: {0}")]
    Divisibility(String),

    /// A mask region is empty (or full) where both classes must be present.
    #[error("empty mask region: {0}")]
    EmptyMask(String),

    /// Both prototypes are zero vectors; the cosine head is undefined.
    #[error("degenerate prototypes: {0}")]
    DegeneratePrototype(String),

    /// A checkpoint file is malformed or inconsistent with the manifest.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// An argument or configuration value violates a precondition.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A finite-difference probe produced a non-finite loss value.
    #[error("gradient check probe: {0}")]
    GradCheckProbe(String),
}

impl Error {
    /// Shorthand used throughout the crate for shape violations.
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
