//! Command-line pipeline: BPE, vocabulary extension, LM pretraining and
//! fine-tuning, translation training, decoding, scoring and manifests.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use cli::{Cli, Command};
pub use error::{CliError, CliResult};

/// Applies `RELM_THREADS` (a positive integer) to the worker pool.
pub fn init_threads_from_env() -> CliResult<()> {
    match std::env::var("RELM_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| CliError::Config(format!("RELM_THREADS must be a positive integer, got `{v}`")))?;
            relm_core::parallel::init_threads(n);
            Ok(())
        }
        Err(_) => Ok(()),
    }
}

pub fn run(cli: &Cli) -> CliResult<serde_json::Value> {
    commands::run(&cli.command)
}
