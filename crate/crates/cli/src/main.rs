//! `cqsim`: run, validate and cross-check classical-quantum hybrid models
//! from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation failure (an invalid
//! model or a failed check), 3 numerical failure.

mod commands;
mod config;
mod output;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cq_core::CqError;

use config::CommonArgs;

#[derive(Parser, Debug)]
#[command(name = "cqsim", version, about = "Classical-quantum hybrid dynamics simulator")]
struct Cli {
    /// Log progress to stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the positivity conditions at the initial point and nearby probes.
    Validate(CommonArgs),
    /// Integrate one trajectory and write it as CSV.
    Run(CommonArgs),
    /// Integrate an ensemble and write per-time means and standard errors.
    Ensemble(CommonArgs),
    /// Compare the trajectory ensemble with the master-equation solver.
    Compare(CommonArgs),
    /// Build the purified model and check its marginals against the original.
    Purify(CommonArgs),
    /// Check the continuous-measurement reading of one step.
    #[command(name = "measure-check")]
    MeasureCheck(CommonArgs),
    /// Test whether the dynamics maps mixtures to mixtures.
    Linearity(CommonArgs),
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(CqError),
}

impl From<CqError> for CliError {
    fn from(e: CqError) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(e) => match e.root() {
                CqError::Positivity(_) | CqError::Symmetry { .. } => 2,
                _ => 1,
            },
        }
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
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .init();
    let result = match &cli.command {
        Command::Validate(a) => commands::validate(a),
        Command::Run(a) => commands::run(a),
        Command::Ensemble(a) => commands::ensemble(a),
        Command::Compare(a) => commands::compare(a),
        Command::Purify(a) => commands::purify(a),
        Command::MeasureCheck(a) => commands::measure_check(a),
        Command::Linearity(a) => commands::linearity(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
