// SPDX-License-Identifier: MIT OR Apache-2.0

//! `latentscm`: interventions, early stopping, influence graphs and
//! superposition readouts from the command line.

mod commands;
mod config;
mod error;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Command;
use config::{RunArgs, RunConfig};
use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "latentscm", version, about = "Causal analysis of latent reasoning steps")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Flip rate of the answer under do(h_t) at every step
    Intervene(RunArgs),
    /// Earliest decodable step and the cumulative solved fraction
    Earlystop(RunArgs),
    /// Step-to-step influence matrix, structure metrics and principal graph
    Influence(RunArgs),
    /// Teacher-forced and probe superposition curves over two-mode prompts
    Superpose(RunArgs),
    /// Write an all-pairs intervention plan for an external exporter
    Plan(RunArgs),
    /// Write baseline (and planned counterfactual) traces from a toy model
    Export(RunArgs),
    /// Compute flips, influence and early stopping from trace files
    Ingest(RunArgs),
}

impl Sub {
    fn split(self) -> (Command, RunArgs) {
        match self {
            Sub::Intervene(a) => (Command::Intervene, a),
            Sub::Earlystop(a) => (Command::EarlyStop, a),
            Sub::Influence(a) => (Command::Influence, a),
            Sub::Superpose(a) => (Command::Superpose, a),
            Sub::Plan(a) => (Command::Plan, a),
            Sub::Export(a) => (Command::Export, a),
            Sub::Ingest(a) => (Command::Ingest, a),
        }
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    let (command, args) = cli.command.split();
    if let Some(jobs) = args.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let cfg = RunConfig::from_args(&args)?;
    for path in commands::run(command, cfg)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { CliError::USAGE } else { 0 });
        }
    };
    match std::panic::catch_unwind(|| execute(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
        Err(_) => ExitCode::from(CliError::INTERNAL),
    }
}
