//! Dense f64 matrix kernel, deterministic RNG, elementary differentiable
//! functions, a reverse-mode gradient tape and the finite-difference oracle.

mod finite_diff;
mod funcs;
mod matrix;
mod rng;
mod tape;

pub use finite_diff::{finite_diff_gradient, gradient_relative_error};
pub use funcs::{kl_diag_gaussian, sample_standard_normal, sigmoid, softmax, softplus};
pub use matrix::Matrix;
pub use rng::Rng;
pub use tape::{Gradients, NodeId, Tape};
