//! `glq`: command-line front end for the LQ-under-volatility-ambiguity toolkit.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use glq_core::rng::DEFAULT_SEED;

#[derive(Debug, Parser)]
#[command(name = "glq", version, about = "Robust LQ control under volatility ambiguity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the Riccati system and write the optimal feedback.
    SolveLq(commands::SolveLqArgs),
    /// Compute a G-expectation by the G-heat equation.
    Gheat(commands::GheatArgs),
    /// Worst-case cost of a control over a scenario family.
    RobustEval(commands::RobustEvalArgs),
    /// Numerical maximum-principle checks on a problem.
    VerifyMp(commands::VerifyMpArgs),
    /// Worst-case switching time of the volatility example.
    ExampleTstar(commands::ExampleArgs),
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Problem file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Monte Carlo paths.
    #[arg(long)]
    pub paths: Option<usize>,
    /// Simulation time step.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value = "glq-out")]
    pub out: PathBuf,
    /// Overwrite a completed run in --out.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    pub fn verification(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<glq_core::Error> for CliError {
    fn from(e: glq_core::Error) -> Self {
        Self {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let workers = match &cli.command {
        Command::SolveLq(a) => a.common.workers,
        Command::Gheat(a) => a.common.workers,
        Command::RobustEval(a) => a.common.workers,
        Command::VerifyMp(a) => a.common.workers,
        Command::ExampleTstar(a) => a.common.workers,
    };
    if let Some(n) = workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let result = match cli.command {
        Command::SolveLq(a) => commands::run_solve_lq(a),
        Command::Gheat(a) => commands::run_gheat(a),
        Command::RobustEval(a) => commands::run_robust_eval(a),
        Command::VerifyMp(a) => commands::run_verify_mp(a),
        Command::ExampleTstar(a) => commands::run_example_tstar(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
