//! Recourse-aware quantization of tabular classifiers.
//!
//! The crate pairs a small feed-forward model stack (reverse-mode autodiff,
//! fake quantizers with straight-through gradients, differentiable
//! mixed-precision bit selection) with constrained recourse generation and a
//! metrics engine that quantifies how quantization changes recourse validity,
//! cost, and direction. Training-based and training-free quantization
//! strategies live behind one [`methods::QuantMethod`] trait and are selected
//! by name at runtime.

pub mod cfptq;
pub mod data;
pub mod error;
pub mod harness;
pub mod methods;
pub mod mat;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod quant;
pub mod recourse;
pub mod tape;
pub mod train;

pub use error::{CfqError, Result};
