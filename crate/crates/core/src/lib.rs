//! Hybrid data/model parallel CNN training.
//!
//! A sequential CNN is built with [`net`], transformed for a model-parallel
//! group size by [`partition`], and executed by [`runtime`] on simulated
//! workers that talk only through the [`fabric`]. [`metrics`] predicts the
//! communication volume and memory of a configuration and reconciles the
//! prediction with the fabric's counters.

pub mod config;
pub mod data;
pub mod experiment;
pub mod fabric;
pub mod metrics;
pub mod net;
pub mod partition;
pub mod runtime;
pub mod par;
pub mod scalar;
pub mod tensor;

pub use scalar::{Scalar, ScalarWidth};
pub use tensor::{Shape, Tensor, TensorError};
