//! Batch front end for the aggregation-tree pipeline.
//!
//! Each command reads a TOML config, writes versioned JSON and text
//! artifacts to an output directory, and records a manifest with the
//! effective config, seed and artifact hashes.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use commands::{
    cmd_balance, cmd_fit, cmd_gates, cmd_simulate, load_sim_config, FitOutcome, GatesOutcome,
    SelectionRecord,
};
pub use config::{LearnerConfig, Overrides, RunConfig, Selection};
pub use error::{CliError, ErrorKind, Stage};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "AGGTREE_THREADS";

/// Parses a thread count; `None` and `0` mean "use every core".
pub fn parse_threads(value: Option<&str>) -> Result<usize, CliError> {
    match value {
        None => Ok(0),
        Some(v) => v.trim().parse().map_err(|_| {
            CliError::input(Stage::Config, format!("{THREADS_ENV} must be a non-negative integer, got `{v}`"))
        }),
    }
}
