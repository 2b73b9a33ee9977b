//! Bi-temporal change detection with a test-time neural memory encoder.
//!
//! The crate is organized bottom-up: a small autodiff tensor core, the
//! recurrent memory module, a chunked-attention encoder with a multi-scale
//! convolutional adapter, cross-stream fusion, a convex-upsampling decoder,
//! pixel/boundary metrics, and a training/evaluation pipeline exposed
//! through the `tcd` binary.
//!
//! Everything numeric is generic over the scalar type; [`Tensor32`] and
//! [`Tensor64`] are the concrete instantiations used by the CLI.

pub mod adapter;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod memory;
pub mod metrics;
pub mod objectives;
pub mod pipeline;
pub mod tensor;

pub use cli::cli_main;
pub use error::{Error, Result};
pub use tensor::Tensor;

/// Single-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor (default for training: the determinism and
/// gradient-verification guarantees are stated at f64).
pub type Tensor64 = tensor::Tensor<f64>;
