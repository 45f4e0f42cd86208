//! Architecture search by self-explanation.
//!
//! An explainer network with a searchable cell learns its weights, explains
//! its predictions with adversarial perturbations, and teaches a fixed
//! audience network through those explanations; the cell architecture is
//! updated to lower both networks' validation losses. Everything runs on a
//! small in-crate reverse-mode autodiff core in double precision.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod explain;
pub mod harness;
pub mod lease;
pub mod par;
pub mod nn;
pub mod params;
pub mod random;
pub mod searchspace;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tensor, VectorSpace};
