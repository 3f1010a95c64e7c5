//! Configuration, experiment pipeline and subcommands behind the `steinrank` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use commands::CommonArgs;
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult, Outcome};
