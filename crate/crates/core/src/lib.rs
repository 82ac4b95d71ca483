//! Adversarial-robustness laboratory.
//!
//! Uncertainty-promoting regularizers (entropy maximization, label smoothing)
//! with and without adversarial training, the attacks used to evaluate them,
//! and margin/Jacobian diagnostics.

pub mod error;
pub mod tensor;
pub mod models;
pub mod losses;
pub mod data;
pub mod attacks;
pub mod training;
pub mod diagnostics;
pub mod experiment;

pub use error::{Error, Result};
