//! Residual convolutional dual-encoder entity linking, with word-order and
//! attention-scope probes run against a small Transformer baseline.

pub mod config;
pub mod data;
pub mod error;
pub mod index;
pub mod model;
pub mod probes;
pub mod rescnn;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
