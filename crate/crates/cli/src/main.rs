//! `cellprog` — battery capacity-fade prognostics pipeline.
//!
//! Exit codes: 0 success, 1 validation failure, 2 configuration error,
//! 3 runtime error. `CELLPROG_THREADS` caps worker parallelism.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ErrorKind {
    Validation,
    Config,
    Runtime,
}

/// Application error carrying the process exit code.
#[derive(Debug)]
pub struct AppError {
    kind: ErrorKind,
    message: String,
}

impl AppError {
    pub fn validation(message: String) -> Self {
        AppError {
            kind: ErrorKind::Validation,
            message,
        }
    }

    pub fn config(message: String) -> Self {
        AppError {
            kind: ErrorKind::Config,
            message,
        }
    }

    pub fn runtime(message: String) -> Self {
        AppError {
            kind: ErrorKind::Runtime,
            message,
        }
    }

    fn code(&self) -> u8 {
        match self.kind {
            ErrorKind::Validation => 1,
            ErrorKind::Config => 2,
            ErrorKind::Runtime => 3,
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<cellprog_core::Error> for AppError {
    fn from(e: cellprog_core::Error) -> Self {
        use cellprog_core::Error as E;
        let kind = match &e {
            E::Configuration(_) | E::IdParse(_) | E::Incompatibility(_) => ErrorKind::Config,
            E::InvalidCell { .. }
            | E::NonMonotonicTime(_)
            | E::MalformedReference(_)
            | E::InsufficientReferences { .. } => ErrorKind::Validation,
            _ => ErrorKind::Runtime,
        };
        AppError {
            kind,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "cellprog",
    version,
    about = "Battery capacity-fade prognostics: ingest telemetry, learn a transition model, forecast capacity trajectories"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check every cell in a manifest against the record invariants.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Export the supervised feature dataset as CSV.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        /// Preset name (model1..model6) supplying the feature spec.
        #[arg(long)]
        preset: Option<String>,
        /// JSON file with a custom feature spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Cells to include: train, test or all.
        #[arg(long, default_value = "all")]
        subset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one transition model and serialize it.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        preset: Option<String>,
        /// JSON file with a full custom model configuration.
        #[arg(long)]
        model_spec: Option<PathBuf>,
        /// Cells to train on: train, test or all.
        #[arg(long, default_value = "train")]
        subset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecast capacity trajectories with a serialized model.
    Forecast {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Cells to forecast: train, test or all.
        #[arg(long, default_value = "test")]
        subset: String,
        /// Comma-separated cell ids (further narrows the subset).
        #[arg(long)]
        cells: Option<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a directory of forecast CSVs.
    Evaluate {
        #[arg(long)]
        forecasts: PathBuf,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline: train every configured model, forecast the test
    /// cells, evaluate, and write all artifacts.
    Run {
        /// Experiment config JSON; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Generate and use the built-in synthetic dataset.
        #[arg(long)]
        synthetic: bool,
        #[arg(long, default_value_t = 8)]
        synthetic_cells: usize,
        #[arg(long, default_value_t = 40)]
        synthetic_patterns: usize,
    },
    /// Emit plot-ready CSV bundles (input distributions, capacity series,
    /// predicted-vs-actual scatter, forecast trajectories).
    PlotData {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn init_thread_pool() {
    if let Ok(value) = std::env::var("CELLPROG_THREADS") {
        match value.parse::<usize>() {
            Ok(n) if n >= 1 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not apply CELLPROG_THREADS={n}: {e}");
                }
            }
            _ => log::warn!("ignoring invalid CELLPROG_THREADS='{value}'"),
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Validate { manifest } => commands::cmd_validate(&manifest),
        Command::Featurize {
            manifest,
            preset,
            spec,
            subset,
            out,
        } => commands::cmd_featurize(&manifest, &preset, &spec, &subset, &out),
        Command::Train {
            manifest,
            preset,
            model_spec,
            subset,
            seed,
            out,
        } => commands::cmd_train(&manifest, &preset, &model_spec, &subset, seed, &out),
        Command::Forecast {
            model,
            manifest,
            subset,
            cells,
            out_dir,
        } => commands::cmd_forecast(&model, &manifest, &subset, &cells, &out_dir),
        Command::Evaluate { forecasts, out } => commands::cmd_evaluate(&forecasts, &out),
        Command::Run {
            config,
            manifest,
            out_dir,
            seed,
            synthetic,
            synthetic_cells,
            synthetic_patterns,
        } => commands::cmd_run(&commands::RunArgs {
            config_path: config,
            manifest,
            out_dir,
            seed,
            synthetic,
            synthetic_cells,
            synthetic_patterns,
        }),
        Command::PlotData {
            manifest,
            results,
            out_dir,
        } => commands::cmd_plotdata(&manifest, &results, &out_dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    init_thread_pool();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
