//! Gradient-aware weight quantization.
//!
//! The pipeline: capture gradients of a calibration sample
//! ([`refmodel::backward`]), rank weights by aggregated gradient magnitude
//! ([`sensitivity`]), keep the top fraction at FP16 and quantize the rest with
//! group-wise asymmetric round-to-nearest ([`quant`]), store the result in the
//! packed `GWQ1` format ([`io`]), and run or evaluate it ([`kernels`],
//! [`refmodel`], [`harness`]).

pub mod cli;
pub mod error;
pub mod harness;
pub mod io;
pub mod kernels;
pub mod quant;
pub mod refmodel;
pub mod sensitivity;
pub mod tensor;

pub use error::{GwqError, Result};
pub use tensor::Tensor;
