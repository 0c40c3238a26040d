use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flsim::cli::{cmd_run, cmd_sweep, cmd_validate, SweepAxis};

/// Federated-learning simulator with malicious-client detection.
#[derive(Parser)]
#[command(name = "flsim", version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write trace.csv / summary.json / score series.
    Run {
        /// Experiment config (TOML); omitted means all defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (overrides run.out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed (overrides run.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the base config once per axis value and write sweep.csv.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Swept knob.
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated axis values, e.g. --values 1.0,0.6,0.2
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Parse and validate a config, echoing the effective settings.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // FLSIM_THREADS caps worker parallelism for client updates and sweep cells.
    if let Ok(threads) = std::env::var("FLSIM_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    let args = Args::parse();
    let code = match args.command {
        Command::Run { config, out, seed } => cmd_run(config.as_deref(), out.as_deref(), seed),
        Command::Sweep { config, out, seed, axis, values } => {
            cmd_sweep(config.as_deref(), out.as_deref(), seed, axis, &values)
        }
        Command::Validate { config } => cmd_validate(config.as_deref()),
    };
    ExitCode::from(code as u8)
}
