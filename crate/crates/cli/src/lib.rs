//! Command-line front end for the `fusillade` simulator: sizing tables,
//! single runs and parameter sweeps driven by a JSON configuration.

pub mod commands;
pub mod config;
mod error;

pub use error::{CliError, CliResult};
