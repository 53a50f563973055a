//! Transformer translation with a doubly-attentive decoder.
//!
//! The decoder's cross-attention attends to the encoded source sentence and
//! to a grid of visual features at once, summing the two attention outputs.
//! Everything runs on a small define-by-run autodiff engine in 64-bit floats.

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Float, ParamId, ParamStore, Tensor};
