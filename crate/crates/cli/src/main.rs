// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::f64::consts::TAU;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cycle_ews::experiment::{self, ConfigError, ExperimentConfig, ExperimentError};
use cycle_ews::io;
use log::{error, info};

#[derive(Parser)]
#[command(
    name = "cycle-ews",
    version,
    about = "Cycle-aware early-warning indicators for a forced Duffing oscillator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (flat TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `master_seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of ensemble runs (overrides `n_runs`).
    #[arg(long)]
    runs: Option<usize>,
    /// Worker threads; all cores by default.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one ensemble member and write its trajectory and events.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Run index within the ensemble.
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Simulate the ensemble and write the per-run feature table.
    Features {
        #[command(flatten)]
        common: Common,
    },
    /// Classify a feature table written by `features` or `experiment`.
    Classify {
        #[command(flatten)]
        common: Common,
        /// Feature CSV; defaults to `<out>/features.csv`.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Full pipeline: simulation, features, classification, report.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
    /// Write the data behind every figure.
    Figures {
        #[command(flatten)]
        common: Common,
    },
    /// Tabulate fold geometry, Floquet multipliers and deterministic delays.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Forcing amplitudes.
        #[arg(long = "d-a", value_delimiter = ',', default_values_t = vec![1.2])]
        d_a: Vec<f64>,
        /// Forcing periods; each gives a rate ω = 2π/period.
        #[arg(long, value_delimiter = ',', default_values_t = vec![225.0])]
        periods: Vec<f64>,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), ExperimentError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.master_seed = s;
    }
    if let Some(n) = common.runs {
        cfg.n_runs = n;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    if let Some(t) = common.threads {
        if t == 0 {
            return Err(ConfigError::Invalid("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| ConfigError::Invalid(format!("thread pool: {e}")))?;
    }
    let out = cfg.out_dir.clone();
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Simulate { common, run } => {
            let (cfg, out) = load(&common)?;
            let s = experiment::simulate_single(&cfg, run, &out)?;
            info!("run {run}: {} jumps, breakdown {}", s.n_jumps, s.breakdown);
        }
        Command::Features { common } => {
            let (cfg, out) = load(&common)?;
            let recs = experiment::extract_feature_table(&cfg, &out)?;
            let valid = recs.iter().filter(|r| r.features.valid).count();
            info!("{valid} of {} runs valid", recs.len());
        }
        Command::Classify { common, features } => {
            let (cfg, out) = load(&common)?;
            let path = features.unwrap_or_else(|| out.join(experiment::FEATURES_FILE));
            let r = experiment::classify_features(&cfg, &path, &out)?;
            info!("cv balanced accuracy {:.4}", r.cv_mean);
        }
        Command::Experiment { common } => {
            let (cfg, out) = load(&common)?;
            experiment::run_experiment(&cfg, &out)?;
        }
        Command::Figures { common } => {
            let (cfg, out) = load(&common)?;
            experiment::run_figure_protocols(&cfg, &out)?;
        }
        Command::Diagnose { common, d_a, periods } => {
            let (cfg, out) = load(&common)?;
            if periods.iter().any(|p| !(*p > 0.0)) {
                return Err(ConfigError::Invalid("--periods must be positive".into()).into());
            }
            let omegas: Vec<f64> = periods.iter().map(|p| TAU / p).collect();
            let rows = experiment::diagnose_geometry(&cfg, &d_a, &omegas)?;
            std::fs::create_dir_all(&out).map_err(|source| ExperimentError::OutDir {
                path: out.display().to_string(),
                source,
            })?;
            experiment::write_diagnostics_csv(&out.join("diagnostics.csv"), &rows)?;
            io::write_json(&out.join("diagnostics.json"), &rows)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
