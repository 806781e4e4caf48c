//! Command-line front end for the `subp` library: config parsing, checkpoints and
//! the `train`, `export`, `infer`, `bench` and `dataset` commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, Result};
