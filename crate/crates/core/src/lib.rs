//! Partially observed mean-field linear-quadratic control.

pub mod adjoint;
pub mod checks;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod lq;
pub mod mfsim;
pub mod model;
pub mod riccati;
pub mod rng;

pub use error::{Error, Result};
