//! Reverse-mode differentiation over dense arrays.
//!
//! A [`Graph`] is a tape rebuilt on every forward pass. Parameters live in a
//! [`ParamStore`] and are bound into the tape by name; after
//! [`Graph::backward`] the resulting [`Gradients`] are accumulated back into
//! the store (optionally filtered, which is how gradient masking is done).

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod ops;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_piecewise, gradient_check_strided, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{ParamStore, Tensor};
