use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use barynet::cli;

/// Decentralized entropic Wasserstein barycenters over simulated agent
/// networks.
#[derive(Parser)]
#[command(name = "barynet", version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a configured run and write its CSV artifacts.
    Run {
        /// Path to the JSON run configuration.
        config: PathBuf,
        /// Output directory (overrides the config and environment default).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Communication-round override.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Run a named verification suite: gradients, estimator, equivalence, or
    /// convergence.
    Verify {
        suite: String,
    },
    /// Print spectral and complexity constants for a configuration.
    GraphInfo {
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = match args.command {
        Command::Run { config, out, seed, iters } => {
            cli::cmd_run(&cli::RunArgs { config, out, seed, iters }).map(|()| 0)
        }
        Command::Verify { suite } => cli::cmd_verify(&suite).map(|ok| if ok { 0 } else { 3 }),
        Command::GraphInfo { config } => cli::cmd_graph_info(&config).map(|()| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(cli::exit_code(&err) as u8)
        }
    }
}
