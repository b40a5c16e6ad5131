//! End-to-end driver: synthetic image-caption data, PGM/PPM ingestion, run
//! configuration, training with metrics and checkpoints, retrieval
//! evaluation and parameter sweeps.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod image_io;
pub mod sweep;
pub mod train;

pub use error::{HarnessError, Result};
