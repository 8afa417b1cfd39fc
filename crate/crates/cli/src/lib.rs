//! Batch front end: configuration, orchestration and artifact emission.

pub mod commands;
pub mod config;
pub mod error;
pub mod store;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{ExperimentConfig, Overrides};
pub use error::{CliError, CliResult};
pub use store::Format;

#[derive(Debug, Parser)]
#[command(name = "covcast", version, about = "Covariance forecasting experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory; every artifact is written below it.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Overrides `seed` (and COVCAST_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; overrides `jobs` (and COVCAST_JOBS).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Forecast horizon in trading days.
    #[arg(long, global = true)]
    pub horizon: Option<usize>,

    /// Comma-separated model ids.
    #[arg(long, global = true, value_delimiter = ',')]
    pub models: Option<Vec<String>>,

    /// Write forecasts as audit CSV instead of binary.
    #[arg(long, global = true)]
    pub csv: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Rolling forecasts for every configured model.
    Forecast,
    /// Loss tables, Friedman and Nemenyi tests, CD diagrams.
    Evaluate,
    /// GMV backtests against the 1/N benchmark.
    Backtest,
    /// forecast, evaluate and backtest in one go.
    Report,
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            horizon: self.horizon,
            models: self.models.clone(),
            seed: self.seed,
            jobs: self.jobs,
        }
    }

    pub fn format(&self) -> Format {
        if self.csv {
            Format::Csv
        } else {
            Format::Binary
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides())?;
    std::fs::create_dir_all(&cli.out)?;
    match cli.command {
        Command::Forecast => commands::cmd_forecast(&cfg, &cli.out, cli.format()).map(|_| ()),
        Command::Evaluate => commands::cmd_evaluate(&cfg, &cli.out).map(|_| ()),
        Command::Backtest => commands::cmd_backtest(&cfg, &cli.out).map(|_| ()),
        Command::Report => commands::cmd_report(&cfg, &cli.out, cli.format()),
    }
}
