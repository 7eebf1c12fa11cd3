use thiserror::Error;

/// Errors produced by tensor ops, model construction, solvers, training and I/O.
#[derive(Debug, Error)]
pub enum FinoError {
    #[error("shape mismatch in {context}: axis {axis} expects {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },

    #[error("{context}: kernel extent {extent} on axis {axis} must be odd")]
    EvenKernel {
        context: &'static str,
        axis: usize,
        extent: usize,
    },

    #[error("{context}: spatial extent {extent} on axis {axis} must be even to pool by 2")]
    OddPoolExtent {
        context: &'static str,
        axis: usize,
        extent: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("time step {dt:.6e} violates the stability limit {limit:.6e}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("non-finite value produced at rollout step {step}")]
    NonFinite { step: usize },

    #[error("training loss became non-finite at epoch {epoch} (last finite epoch: {last_finite:?})")]
    Divergence {
        epoch: usize,
        last_finite: Option<usize>,
    },

    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("backward already ran on this tape; record a fresh tape first")]
    BackwardConsumed,

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, FinoError>;
