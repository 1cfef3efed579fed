//! The `grafit` command-line tool. [`run`] parses arguments, merges the
//! optional key=value config file, executes one subcommand and maps the
//! outcome to an exit status.

mod args;
mod commands;
pub mod config;
pub mod manifest;
mod output;

use std::ffi::OsString;

use grafit_core::GrafitError;

pub use args::Cli;
pub use manifest::RunManifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] GrafitError),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(GrafitError::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            CliError::Core(_) | CliError::Csv(_) => EXIT_DATA,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Runs the tool on `argv` (program name first) and returns the exit status.
/// Messages go to stderr; nothing is written when parsing fails.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let invocation = match config::parse_with_config(&argv) {
        Ok(inv) => inv,
        Err(config::ParseFailure::Clap(e)) => {
            // help and version requests also arrive here
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
        Err(config::ParseFailure::Cli(e)) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let threads = invocation.cli.command.common().threads.max(1);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {threads} worker threads: {e}");
            return EXIT_DATA;
        }
    };
    match pool.install(|| commands::execute(&invocation)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
