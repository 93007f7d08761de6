//! `hybrid-ir`: synthesize captures, fit, render, export, relight and
//! check gradients.
//!
//! Settings resolve in three layers: the `--preset`, then the TOML file
//! given by `--config`, then individual flags. Every run writes the
//! resolved settings to `run.json` in the output directory.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::Cli;

/// Errors that exit with status 2 rather than 1.
#[derive(Debug)]
pub struct InternalError(pub String);

impl std::fmt::Display for InternalError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InternalError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<InternalError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<hybrid_ir::Error>() {
        Some(hybrid_ir::Error::Invariant(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
