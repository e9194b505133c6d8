//! Pipeline orchestration for the `trace` binary: run configuration,
//! checkpoints and the subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use commands::Run;
pub use config::RunConfig;
pub use error::{CliError, Result};
