//! Command-line front end: CSV ingestion, report files and the `mnbr`
//! subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;
pub mod manifest;

pub use commands::{run, Cli};
pub use error::CliError;
