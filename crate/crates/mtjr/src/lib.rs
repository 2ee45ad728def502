//! File formats, CSV reports and command implementations for `mtjr-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
mod error;
pub mod report;

pub use error::{Error, ExitCode, Result};
pub use mtjr_core as core;
