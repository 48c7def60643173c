//! Core library: a tape-based autodiff engine, a small Transformer, and a
//! registry of attention regularization schemes (token-level masking with
//! sibling and self variants, attention dropout, head dropout), plus the
//! training, data, and verification machinery around them.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod mask;
pub mod oracle;
pub mod params;
pub mod regularizer;
pub mod rng;
pub mod sweep;
pub mod tasks;
pub mod tensor;
pub mod training;
pub mod transformer;
pub mod verify;

pub use error::{Error, Result};
