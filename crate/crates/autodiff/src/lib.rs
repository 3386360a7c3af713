//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Operations are recorded on a [`Graph`] in execution order; [`Graph::backward`]
//! replays the tape in reverse from any scalar node and returns a fresh
//! [`Gradients`] table, so one forward pass can serve several backward passes.

mod error;
pub mod gradcheck;
mod graph;
mod ops;
pub mod rng;
pub mod suite;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{finite_diff_check, max_relative_error, numeric_gradient};
pub use graph::{Gradients, Graph, Var};
pub use ops::{gelu_scalar, DEFAULT_LN_EPS, DEFAULT_THETA};
pub use rng::CounterRng;
pub use tensor::Tensor;
