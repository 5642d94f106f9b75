//! Command-line front end: dataset CSV files, TOML settings, fitted-parameter
//! JSON and the `fit`, `predict`, `benchmark`, `pif` and `simulate` commands.

pub mod cli;
pub mod commands;
pub mod config;
pub mod csv_io;
pub mod error;
pub mod params_io;

pub use error::{CliError, CliResult};
