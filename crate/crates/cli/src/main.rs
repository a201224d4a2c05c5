//! `halo`: training, analysis and sharded-communication runs driven by a
//! versioned TOML config.
//!
//! Exit codes: 0 success, 2 input error (bad config, unreadable or corrupt
//! file), 3 numerical failure (divergence).

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use halo::tensor::Axis;

use crate::config::Config;

pub enum Failure {
    Input(String),
    Numerical(String),
}

impl From<halo::Error> for Failure {
    fn from(e: halo::Error) -> Self {
        match e {
            halo::Error::Diverged { .. } | halo::Error::NonFinite { .. } => Failure::Numerical(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Side {
    None,
    Left,
    Right,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::None => "none",
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AxisArg {
    Rows,
    Columns,
}

#[derive(Parser)]
#[command(
    name = "halo",
    version,
    about = "Hadamard-assisted low-precision training experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy model; writes loss.csv and manifest.json.
    Train { config: PathBuf },
    /// Per-layer gradient cosines under forward/backward quantization.
    Sensitivity { config: PathBuf },
    /// Sweep Hadamard placements; writes ablation.csv.
    Ablate { config: PathBuf },
    /// Sharded-gather simulation; writes ledger.json with an equivalence verdict.
    Fsdp { config: PathBuf },
    /// Header and statistics of a tensor file.
    Inspect {
        path: PathBuf,
        /// Rotate before computing statistics.
        #[arg(long, value_enum, default_value = "none")]
        hadamard: Side,
        /// Slices along which outliers are counted.
        #[arg(long, value_enum, default_value = "columns")]
        axis: AxisArg,
    },
    /// Quantization error of a tensor file per format and rotation, as CSV.
    Quantreport {
        path: PathBuf,
        /// Override each format's default granularity (tensor, row, column, blockRxC, mx).
        #[arg(long)]
        granularity: Option<String>,
    },
}

fn thread_count() -> Result<usize, Failure> {
    match std::env::var("HALO_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::Input(format!(
                "HALO_THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let threads = thread_count()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Input(e.to_string()))?;
    match cli.command {
        Command::Train { config } => {
            let (cfg, raw) = Config::load(&config)?;
            commands::cmd_train(&cfg, &raw)
        }
        Command::Sensitivity { config } => {
            let (cfg, raw) = Config::load(&config)?;
            commands::cmd_sensitivity(&cfg, &raw)
        }
        Command::Ablate { config } => {
            let (cfg, raw) = Config::load(&config)?;
            commands::cmd_ablate(&cfg, &raw)
        }
        Command::Fsdp { config } => {
            let (cfg, raw) = Config::load(&config)?;
            commands::cmd_fsdp(&cfg, &raw)
        }
        Command::Inspect { path, hadamard, axis } => {
            let axis = match axis {
                AxisArg::Rows => Axis::Rows,
                AxisArg::Columns => Axis::Columns,
            };
            commands::cmd_inspect(&path, hadamard, axis)
        }
        Command::Quantreport { path, granularity } => commands::cmd_quantreport(&path, granularity.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
    }
}
