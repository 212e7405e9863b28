//! The `sst` command-line tool.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage error, 3 training
//! diverged, 4 a verification suite failed.

pub mod args;
pub mod checkpoint;
mod commands;
pub mod config;

use std::ffi::OsString;
use std::process::ExitCode;

use args::Command;

pub use commands::{eval_scenes, eval_table, EvalRow};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Clap(clap::Error),
    Diverged(String),
    Verification(String),
    Other(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Clap(e) => e.exit_code() as u8,
            Failure::Diverged(_) => 3,
            Failure::Verification(_) => 4,
            Failure::Other(_) => 1,
        }
    }
}

impl From<clap::Error> for Failure {
    fn from(e: clap::Error) -> Self {
        Failure::Clap(e)
    }
}

impl From<sst_core::Error> for Failure {
    fn from(e: sst_core::Error) -> Self {
        Failure::Other(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

pub fn run(argv: Vec<OsString>) -> Result<(), Failure> {
    let cli = config::parse(argv)?;
    let threads = cli.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    // Fails only if a pool already exists, as in repeated in-process runs.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a, threads),
        Command::Train(a) => commands::train(&a, threads),
        Command::Reconstruct(a) => commands::reconstruct(&a, threads),
        Command::Eval(a) => commands::eval(&a, threads),
        Command::Gradcheck(a) => commands::gradcheck(&a, threads),
        Command::OracleCheck(a) => commands::oracle_check(&a, threads),
    }
}

pub fn main_with(argv: Vec<OsString>) -> ExitCode {
    match run(argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Clap(e) => {
                    let _ = e.print();
                }
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Diverged(m) => eprintln!("error: training diverged: {m}"),
                Failure::Verification(m) => eprintln!("error: verification failed: {m}"),
                Failure::Other(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}
