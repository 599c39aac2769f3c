//! Minimal dense-tensor kernels with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Trainable values
//! live in a [`ParamStore`] that outlives individual graphs; each graph pulls
//! parameters in as leaves and writes their gradients back on
//! [`Graph::backward`]. [`Adam`] consumes those gradients and
//! [`finite_diff_check`] compares them against central differences.

mod adam;
mod error;
mod gradcheck;
mod graph;
pub mod nn;
mod param;
mod tensor;

pub use adam::Adam;
pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
