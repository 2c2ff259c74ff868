//! Spectral auditing of LoRA weight deltas.

pub mod adapter_io;
pub mod alignment;
pub mod behavior_link;
pub mod centroid;
pub mod classify;
pub mod cli;
pub mod error;
pub mod pca;
pub mod pipeline;
pub mod report;
pub mod spectral;
pub mod stats;
pub mod synthgen;
pub mod util;

pub use error::{Error, ErrorCategory, Result};
