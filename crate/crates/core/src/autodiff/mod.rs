//! Reverse-mode automatic differentiation over NCHW tensors.
//!
//! A [`Graph`] records every operation as it executes. Values that depend
//! only on constants are recorded without backward bookkeeping, so frozen
//! sub-networks cost a plain forward pass.

mod adam;
mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{default_step, directional_check, directional_check_against, grad_check, grad_check_coords, GradCheckReport};
pub use graph::{Gradients, Graph, Var};

/// Negative slope of every leaky ReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Variance guard of every instance normalization.
pub const NORM_EPS: f64 = 1e-5;
