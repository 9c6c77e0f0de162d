//! `esgvi` command-line front end.
//!
//! Exit codes: 0 success, 2 parse or configuration error (including missing
//! input files), 3 non-convergence, 1 any other failure.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "esgvi", version, about = "Sparse variational trajectory estimation with noise-model learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate train and test datasets, or a pose graph with `--posegraph`.
    Simulate(Overrides),
    /// Learn noise parameters from measurements with EM.
    Train(Overrides),
    /// Estimate a trajectory under learned parameters.
    Infer(Overrides),
    /// Score an estimated trajectory against groundtruth.
    Evaluate(Overrides),
    /// Optimize a g2o pose graph.
    Posegraph(Overrides),
}

pub enum Failure {
    Config(String),
    NotConverged(String),
    Other(String),
}

impl From<esgvi::Error> for Failure {
    fn from(e: esgvi::Error) -> Self {
        use esgvi::Error as E;
        match e {
            E::DidNotConverge { .. } => Failure::NotConverged(e.to_string()),
            E::Parse { .. }
            | E::NonNormalizedQuaternion { .. }
            | E::Io(_)
            | E::InvalidArgument(_)
            | E::InvalidDof { .. }
            | E::MissingGroundtruth(_)
            | E::IllPosed(_) => Failure::Config(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (run, flags): (fn(&RunConfig) -> Result<(), Failure>, Overrides) = match cli.command {
        Command::Simulate(o) => (commands::simulate, o),
        Command::Train(o) => (commands::train, o),
        Command::Infer(o) => (commands::infer, o),
        Command::Evaluate(o) => (commands::evaluate, o),
        Command::Posegraph(o) => (commands::posegraph, o),
    };
    let result = RunConfig::resolve(flags).map_err(Failure::Config).and_then(|cfg| run(&cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::NotConverged(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
