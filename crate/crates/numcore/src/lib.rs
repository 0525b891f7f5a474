//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records primitives in creation order; [`Tape::backward`]
//! replays them in reverse. Parameters live outside the tape as plain
//! [`Tensor`] values and are bound as leaves for each forward pass, so one
//! tape per worker thread is all the synchronization there is.

pub mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use adam::{adam_step, global_norm, AdamConfig, AdamState, StepStats};
pub use error::{NumError, Result};
pub use real::{lit, DType, Real};
pub use tape::{Gradients, Reduction, Tape, Var, MASK_FILL};
pub use tensor::Tensor;
