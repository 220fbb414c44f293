//! Dense linear algebra, scalar nonlinearities, and counter-based random
//! streams. Everything downstream builds on these three pieces; all values
//! are `f64`.

mod matrix;
mod rng;
mod scalar;

pub use matrix::{affine, Matrix};
pub use rng::{label, RngStream};
pub use scalar::{logit, sigm, sigm_deriv, softplus};
