//! `gsc`: fit synthetic control weights, estimate effects and variances,
//! inspect weight networks and run randomization experiments.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::{invalid, Failure};
use config::RunConfig;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gsc", version, about = "Design-based generalized synthetic control")]
struct Cli {
    /// TOML file with default settings; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for the parallel fits and experiments.
    #[arg(long, global = true, env = "GSC_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit weights for one treated unit and period and report the estimate.
    Fit(RunConfig),
    /// Estimate, unbiased variance estimate and optionally the placebo variance.
    Variance(RunConfig),
    /// Placebo variance for one treated unit and period.
    Placebo(RunConfig),
    /// Flow network of a weight slice with centrality and unbiased propensities.
    Network(RunConfig),
    /// Bias, RMSE and average standard error over an assignment design.
    Simulate(RunConfig),
    /// Several treated units at one period.
    Multi(RunConfig),
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(invalid("worker count must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global().map_err(|e| invalid(e.to_string()))?;
    }
    let file = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(invalid)?,
        None => RunConfig::default(),
    };
    let (flags, cmd): (RunConfig, fn(&RunConfig) -> Result<String, Failure>) = match cli.command {
        Command::Fit(c) => (c, commands::fit),
        Command::Variance(c) => (c, commands::variance),
        Command::Placebo(c) => (c, commands::placebo),
        Command::Network(c) => (c, commands::network),
        Command::Simulate(c) => (c, commands::simulate),
        Command::Multi(c) => (c, commands::multi),
    };
    let cfg = flags.over(file);
    cfg.check().map_err(invalid)?;
    let out = cmd(&cfg)?;
    match &cfg.output {
        Some(path) => std::fs::write(path, out).map_err(|e| invalid(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(out.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Failure { code: 1, message: e.to_string() })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
