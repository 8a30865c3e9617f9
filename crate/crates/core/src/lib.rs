//! Encoder-decoder Transformer translation with optional recurrent stacking.

pub mod analysis;
pub mod data;
pub mod decoding;
pub mod error;
pub mod model;
pub mod tensor;
pub mod toy;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
