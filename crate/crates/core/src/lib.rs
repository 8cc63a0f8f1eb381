//! Variational inference with coupled finite-difference gradients.
//!
//! Parameters that cannot be reparameterized (Gamma shape, Wishart degrees of
//! freedom, Poisson rate, ...) get their ELBO gradient from a central finite
//! difference between two *coupled* draws at `λ - ε` and `λ + ε`, with the
//! variational density always evaluated at the unperturbed `λ`. All other
//! parameters use the ordinary reparameterization gradient. Score-function
//! (BBVI) and Rao-Blackwellized score estimators are provided as baselines.

pub mod couplings;
pub mod diagnostics;
pub mod distributions;
pub mod error;
pub mod estimators;
pub mod families;
pub mod io;
pub mod models;
pub mod optimize;

pub use error::{Error, Result};
