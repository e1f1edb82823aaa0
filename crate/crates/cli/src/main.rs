//! Batch command-line front end: grid identification, single closed-loop
//! runs, and three-way controller comparisons. Exit codes are stable for
//! scripting: 0 success, 1 runtime failure, 2 configuration or usage error.

mod commands;
mod manifest;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "airpath",
    version,
    about = "Diesel airpath MPC toolkit: identify LPV model grids, run closed-loop simulations, compare controllers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Identify an LPV model grid against the surrogate plant and write it
    /// (with precomputed terminal penalties) as JSON.
    Identify {
        /// Plant parameter JSON file ({} selects all defaults).
        #[arg(long)]
        plant: std::path::PathBuf,
        /// Output grid file.
        #[arg(long)]
        out: std::path::PathBuf,
        /// Mesh as SPEEDxFUEL breakpoint counts, e.g. 9x11.
        #[arg(long, default_value = "9x11")]
        mesh: String,
        /// Seed for the perturbation experiments.
        #[arg(long, default_value_t = 0x51d)]
        seed: u64,
    },
    /// Run one closed-loop simulation from a run-configuration file.
    Run {
        #[arg(long)]
        config: std::path::PathBuf,
        /// Output directory (defaults under $AIRPATH_OUT_ROOT or ./out).
        #[arg(long)]
        out: Option<std::path::PathBuf>,
    },
    /// Run the (mode x seed) cell product and produce a comparison table
    /// against the feedback-only baseline.
    Compare {
        #[arg(long)]
        config: std::path::PathBuf,
        /// Comma-separated feedforward modes: none, lut, mpc.
        #[arg(long, default_value = "none,lut,mpc")]
        modes: String,
        /// Seeds as a..b range or comma list, e.g. 1..5 or 1,3,7.
        #[arg(long, default_value = "1..5")]
        seeds: String,
        #[arg(long)]
        out: Option<std::path::PathBuf>,
        /// Parallel cells (defaults to the number of CPUs).
        #[arg(long)]
        jobs: Option<usize>,
    },
}

/// Errors carrying their process exit code.
pub enum CliError {
    /// Configuration or usage problem (exit 2).
    Config(String),
    /// Runtime failure (exit 1).
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

pub fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

pub fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Identify {
            plant,
            out,
            mesh,
            seed,
        } => commands::identify::run(&plant, &out, &mesh, seed),
        Command::Run { config, out } => commands::run::run(&config, out.as_deref()),
        Command::Compare {
            config,
            modes,
            seeds,
            out,
            jobs,
        } => commands::compare::run(&config, &modes, &seeds, out.as_deref(), jobs),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message());
        std::process::exit(e.code());
    }
}

/// Default output root: $AIRPATH_OUT_ROOT or ./out.
pub fn output_root() -> std::path::PathBuf {
    std::env::var_os("AIRPATH_OUT_ROOT")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::path::PathBuf::from("out"))
}
