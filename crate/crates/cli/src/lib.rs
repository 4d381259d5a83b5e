//! Configuration, weight persistence and the end-to-end training and
//! comparison commands behind the `diabnet` binary.

pub mod commands;
pub mod config;
pub mod container;
pub mod error;
pub mod pipeline;

pub use config::{Configuration, PipelineConfig};
pub use error::{CliError, Result};
