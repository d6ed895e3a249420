//! Synthetic long videos, streaming runs under each memory discipline, the
//! long-video cost comparison and the bank-composition ablation, with CSV
//! and JSON reports.

pub mod ablate;
pub mod compare;
pub mod config;
pub mod error;
pub mod maskio;
pub mod report;
pub mod stream;
pub mod synth;

pub use error::{Error, Result};
