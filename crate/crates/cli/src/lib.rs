//! Command-line front end: configuration, checkpoints, CSV reports and the
//! subcommands that tie the pipeline together.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod report;

pub use commands::{run, Command};
pub use config::RunConfig;
