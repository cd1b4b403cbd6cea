//! The `ghvae` command-line driver: config resolution, the subcommands, and
//! their reports and media.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod media;
pub mod report;

pub use args::Cli;
pub use config::RunConfig;
pub use error::{CliError, CliResult};

/// Size rayon's global pool from `GHVAE_THREADS` when it is set.
pub fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("GHVAE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Invalid(format!("GHVAE_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}
