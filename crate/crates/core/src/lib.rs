//! Training dynamics of variational autoencoders on data supported on a
//! low-dimensional manifold: closed-form linear losses, Monte-Carlo
//! nonlinear losses, optimizers, and the diagnostics used to check what the
//! trained models recover.

pub mod datasets;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod linear_vae;
pub mod nonlinear_vae;
pub mod rng;

pub use error::{Error, Result};
