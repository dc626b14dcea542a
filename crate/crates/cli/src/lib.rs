//! Pipeline commands behind the `shapeprior` binary: population synthesis,
//! prior training, held-out evaluation and subject-wise cross-validation.
//!
//! Each command writes its artifacts plus a `run_manifest.json` into its
//! output directory.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod manifest;
mod svg;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, CliResult};
