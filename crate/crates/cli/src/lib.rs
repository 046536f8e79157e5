//! Command-line front end: strict config parsing, training runs with CSV
//! and SVG output, policy evaluation, and diagnostics.

pub mod commands;
pub mod config;
pub mod diag;
pub mod output;
pub mod plot;

pub use commands::{run, Cli, CliError};
pub use config::{parse_config, parse_config_str, ConfigError};
