//! Image restoration with multi-dimensional dynamic convolution and
//! transposed self-attention.
//!
//! The crate carries its own small tensor engine with tape-based reverse-mode
//! differentiation ([`tensor`]), the model layers built on it ([`dynconv`],
//! [`blocks`], [`network`]), synthetic degradations and image I/O ([`data`]),
//! the training loop ([`train`]) and quality metrics ([`metrics`]).

pub mod blocks;
pub mod data;
pub mod dynconv;
pub mod network;
mod error;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
