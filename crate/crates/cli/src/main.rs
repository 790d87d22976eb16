//! `timeembed` command-line runner.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use timeembed::encoding::EncoderConfig;

use config::ExperimentConfig;

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "TIMEEMBED_THREADS";

#[derive(Parser)]
#[command(name = "timeembed", version, about = "Time-embedding experiments on irregular time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(Common),
    /// Cross-validate every configured model and write reports and models.
    Train(Common),
    /// Re-evaluate trained models with test observations removed.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated keep fractions, e.g. `1,0.5,0.1`.
        #[arg(long, value_delimiter = ',')]
        keep_fractions: Option<Vec<f64>>,
    },
    /// Append time-embedding columns to a CSV of timestamps.
    Encode {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 48.0)]
        max_time: f64,
        #[arg(long)]
        force: bool,
    },
}

fn resolve(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| anyhow!("no output directory: pass --out or set `out` in the config"))?;
    Ok((cfg, out))
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a number"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Gen(c) => {
            let (cfg, out) = resolve(&c)?;
            commands::cmd_gen(&cfg, &out, c.seed, c.force)
        }
        Command::Train(c) => {
            let (cfg, out) = resolve(&c)?;
            commands::cmd_train(&cfg, &out, c.seed, c.force)
        }
        Command::Sweep { common, keep_fractions } => {
            let (cfg, out) = resolve(&common)?;
            commands::cmd_sweep(&cfg, &out, common.seed, keep_fractions, common.force)
        }
        Command::Encode {
            input,
            out,
            dim,
            max_time,
            force,
        } => commands::cmd_encode(&input, &out, &EncoderConfig::temporal(dim, max_time)?, force),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
