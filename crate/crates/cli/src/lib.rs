//! Command-line front end: configuration, run directories and commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod rundir;
pub mod svg;

pub use error::{CliError, CliResult};

pub const THREADS_VAR: &str = "LAGOT_THREADS";

/// Caps the global worker pool at `LAGOT_THREADS` when set.
pub fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_VAR} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}
