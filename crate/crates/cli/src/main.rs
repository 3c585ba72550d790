//! `wqsp`: sensor placement, simulation and estimation runs for chlorine
//! water-quality models.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a configuration
//! error.

mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ConfigArgs, ConfigError};
use manifest::Manifest;

#[derive(Debug, Parser)]
#[command(name = "wqsp", version, about = "Water-quality sensor placement")]
struct Cli {
    /// Worker threads (defaults to all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Greedy sensor placement over all hydraulic steps and scenarios
    Place(ConfigArgs),
    /// Forward simulation of the water-quality model
    Simulate(ConfigArgs),
    /// Metric of a placement per step and against random placements
    Evaluate(ConfigArgs),
    /// Kalman-filter state estimation with a sensor set
    Estimate(ConfigArgs),
    /// Dimensions, sparsity and time steps of the assembled model
    Inspect(ConfigArgs),
    /// Write synthetic hydraulics for a network
    GenHydraulics(ConfigArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(config::config_error("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let (name, args) = match &cli.command {
        Command::Place(a) => ("place", a),
        Command::Simulate(a) => ("simulate", a),
        Command::Evaluate(a) => ("evaluate", a),
        Command::Estimate(a) => ("estimate", a),
        Command::Inspect(a) => ("inspect", a),
        Command::GenHydraulics(a) => ("gen-hydraulics", a),
    };
    let loaded = config::load(args)?;
    let manifest = Manifest::new(name, loaded.config.clone(), loaded.file.as_ref().map(|p| p.display().to_string()));
    match cli.command {
        Command::Place(_) => commands::place(&loaded, manifest),
        Command::Simulate(_) => commands::simulate_cmd(&loaded, manifest),
        Command::Evaluate(_) => commands::evaluate(&loaded, manifest),
        Command::Estimate(_) => commands::estimate(&loaded, manifest),
        Command::Inspect(_) => commands::inspect(&loaded, manifest),
        Command::GenHydraulics(_) => commands::gen_hydraulics(&loaded, manifest),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("{e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
