use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use nlfb::{thread_pool, threads_from_env};
use nlfb_cli::{parse_config, run, CliError, Subcommand};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Solve,
    RhoSweep,
    Refine,
    OracleCompare,
    Analyze,
}

impl From<Command> for Subcommand {
    fn from(c: Command) -> Self {
        match c {
            Command::Solve => Subcommand::Solve,
            Command::RhoSweep => Subcommand::RhoSweep,
            Command::Refine => Subcommand::Refine,
            Command::OracleCompare => Subcommand::OracleCompare,
            Command::Analyze => Subcommand::Analyze,
        }
    }
}

/// Experiments on discretized nonlocal Bernoulli functionals.
///
/// NLFB_THREADS caps the number of worker threads.
#[derive(Debug, Parser)]
#[command(name = "nlfb", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Experiment configuration (flat `section.key = value` file).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; overrides `solver.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn execute(args: &Args) -> Result<(), CliError> {
    let mut config = parse_config(&args.config)?;
    let text = std::fs::read(&args.config).map_err(|source| CliError::Io {
        path: args.config.clone(),
        source,
    })?;
    if let Some(seed) = args.seed {
        config.solver.seed = seed;
    }
    let out = args.out.clone().unwrap_or_else(|| config.output.dir.clone());
    let pool = thread_pool(threads_from_env()?)?;
    let manifest = pool.install(|| run(args.command.into(), &config, &text, &out))?;
    println!("{}", serde_json::to_string_pretty(&manifest["results"]).unwrap_or_default());
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nlfb: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
