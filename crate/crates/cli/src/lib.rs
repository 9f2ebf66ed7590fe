//! Command-line driver. Exit codes: 0 success, 1 usage error, 2 data error,
//! 3 training divergence.

pub mod args;
mod commands;
pub mod config;

use std::ffi::OsString;

use clap::{CommandFactory, FromArgMatches};

use crate::args::{Cli, Command};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Divergence(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
            Failure::Divergence(_) => EXIT_DIVERGED,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Divergence(m) => m,
        }
    }

    pub(crate) fn from_core(e: impl Into<gitseg::Error>) -> Self {
        e.into().into()
    }
}

impl From<gitseg::Error> for Failure {
    fn from(e: gitseg::Error) -> Self {
        match e {
            gitseg::Error::Divergence { .. } => Failure::Divergence(e.to_string()),
            gitseg::Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    let result = match &cli.command {
        Command::Fixture(a) => commands::fixture(a),
        Command::Train(a) => commands::train_cmd(a, sub),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::Rle(c) => commands::rle(c),
        Command::Curves(a) => commands::curves(a),
        Command::Grid(a) => commands::grid(a, sub),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.exit_code()
        }
    }
}
