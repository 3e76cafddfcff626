use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mfgweak_cli::{run, Command, RunOptions};

/// Monte-Carlo solver for weak-formulation mean-field games.
#[derive(Debug, Parser)]
#[command(name = "mfgweak", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the `output` field of the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads. Results do not depend on this value.
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides `monte_carlo.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let opts = RunOptions {
        command: cli.command,
        config_path: cli.config,
        out: cli.out,
        workers: cli.workers,
        seed: cli.seed,
    };
    match run(&opts) {
        Ok(status) => ExitCode::from(status.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
