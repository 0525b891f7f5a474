//! Behavior cloning with an auxiliary instruction-prediction decoder.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod kv;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
