//! FINO: a strictly local, finite-difference-style neural operator for
//! time-stepped PDE surrogates, with classical reference solvers, an
//! autoregressive trainer, benchmark metrics, and an empirical check of the
//! one-step-to-rollout error bound.

pub mod error;
pub mod gradcheck;
pub mod tensor;

pub use error::{FinoError, Result};
pub use tensor::{Dtype, PaddingMode, Scalar, Tape, Tensor, VarId};
