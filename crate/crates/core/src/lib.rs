//! Quantization toolkit for MLP-based vision models.

pub mod autograd;
pub mod cli;
pub mod data;
pub mod error;
pub mod models;
pub mod pipeline;
pub mod quant;
pub mod rng;
pub mod sensitivity;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{IntTensor, Tensor};
