//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid sizes, options or configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    /// Array shapes that do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A time step produced non-finite values.
    #[error("instability: non-finite state (dt = {dt:e}, eps = {eps:e})")]
    Instability { dt: f64, eps: f64 },

    /// A fitting-scheme stage reconstruction produced non-finite values.
    #[error("stage divergence in {0}")]
    StageDivergence(String),

    /// Predicted scale parameter collapsed below the supported range.
    #[error("scale error: eps_pred = {0:e} is below 1e-8")]
    Scale(f64),

    /// Non-finite ansatz output.
    #[error("overflow in ansatz output at scale m = {0}")]
    Overflow(usize),

    /// Non-finite gradient or loss during training.
    #[error("divergence at iteration {iter}: {path}")]
    Divergence { iter: usize, path: String },

    /// Metric with an all-zero reference table.
    #[error("undefined metric: exact coefficient table is all zero")]
    UndefinedMetric,

    /// Sparse regression removed every column.
    #[error("empty model: every dictionary column was thresholded away")]
    EmptyModel,

    /// Dataset too short or otherwise unusable for an operation.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Unrecognized file content.
    #[error("format error: {0}")]
    Format(String),

    /// File content that ends early or has inconsistent sizes.
    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
