//! Interpretable feedforward neural networks.
//!
//! An IFFNN computes a per-sample weight vector (binary) or weight matrix
//! (multi-class) from an arbitrary feedforward trunk and then classifies with
//! logistic or softmax regression over those weights. Every logit is therefore
//! an exact sum of per-feature contributions, which [`interpret`] turns into
//! importance maps.
//!
//! The crate also contains the INBEN synthetic benchmark, whose labels come
//! from known feature patterns, and the Accuracy@N score that measures how
//! well an importance ranking recovers them.

pub mod autodiff;
pub mod datasets;
pub mod inben;
pub mod interpret;
pub mod models;
mod linalg;
pub mod tensor;
pub mod training;

pub use tensor::{Tensor, TensorError};
