//! A small, deterministic tensor library with a reverse-mode differentiation tape.
//!
//! Values live in [`Tensor`]; computations are recorded on a [`Graph`] as they
//! run and differentiated with [`Graph::backward`]. Everything is generic over
//! [`Real`] so the same layer code runs in `f32` for training and `f64` for
//! gradient checking.

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod real;
pub mod rng;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::grad_check;
pub use graph::{BatchStats, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
