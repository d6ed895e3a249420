//! Constant-memory matching-based video object segmentation.
//!
//! The crate bundles a small f64 tensor library with reverse-mode
//! differentiation, seeded stand-in encoders, three memory-bank disciplines
//! (append-every-θ, EMA blend, and a constant-size bank with a recurrent
//! dynamic embedding), the spatio-temporal aggregation module that updates
//! that embedding, attention readout with top-k filtering, and the training
//! objective used to fit it.

pub mod autodiff;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod memory;
pub mod model;
pub mod ops;
pub mod readout;
pub mod sam;
pub mod tensor;
#[cfg(test)]
mod testutil;
pub mod train;
pub mod weights;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use ops::ConvSpec;
pub use tensor::{Tensor, TensorArchive};
