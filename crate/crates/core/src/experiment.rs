//! End-to-end orchestration: configuration, the per-run pipeline
//! (simulate, detect, label, truncate, extract), classification, figure
//! protocols and geometry diagnostics.
//!
//! Each run's trajectory is dropped as soon as its features are extracted,
//! so memory stays flat in the ensemble size.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classify::{self, ClassificationReport, ClassifierConfig, ClassifyError, Dataset, SvmHyperparams};
use crate::events::{self, BreakdownSummary, DetectorConfig, EventError, SegmentSet};
use crate::features::{self, circular_mean, circular_std, FeatureConfig, FeatureRecord, FeatureVector, InvalidReason};
use crate::geometry::{self, GeometryReport, FOLD_FORCING};
use crate::io::{self, IoError};
use crate::seeds::{derive_seed, run_seed, LABEL_FOLDS, LABEL_PERMUTATION, LABEL_SIMULATION};
use crate::sim::{self, AmplitudeSchedule, DminSampler, SimConfig, SimError, Trajectory};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("cannot create output directory {path}: {source}")]
    OutDir {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Events(#[from] EventError),
}

impl ExperimentError {
    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            _ => 1,
        }
    }
}

/// Flat key-value experiment configuration. Every key is optional; the
/// defaults reproduce the paper protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub n_runs: usize,
    pub out_dir: PathBuf,

    pub dt: f64,
    pub t_total: f64,
    pub forcing_period: f64,
    pub sigma: f64,
    pub x0: f64,
    pub d_max: f64,
    /// Fixed ramp end value; when set it replaces the uniform draw.
    pub d_min: Option<f64>,
    pub d_min_low: f64,
    pub d_min_high: f64,

    pub x_up: f64,
    pub x_low: f64,
    pub n_min: usize,
    pub breakdown_factor: f64,

    pub p_buf: f64,
    pub detrend_degree: usize,
    pub window_w: usize,
    pub phase_std_min_window: usize,
    pub min_cycles: usize,
    pub min_jumps: usize,

    pub k_folds: usize,
    pub permutation_repeats: usize,
    pub svm_lambda: Option<f64>,
    pub svm_max_iter: usize,
    pub svm_tol: f64,
    pub svm_eta0: f64,
    pub svm_t0: f64,

    pub fig_levels: Vec<f64>,
    /// Forcing periods spent on each level of the piecewise protocol.
    pub fig_level_periods: usize,
    pub fig_runs: usize,
    pub fig_breakdown_d_min: f64,

    pub diag_transient_periods: usize,
    pub diag_floquet_tol: f64,
    pub diag_delay_periods: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let det = DetectorConfig::default();
        let feat = FeatureConfig::default();
        let svm = SvmHyperparams::default();
        let cls = ClassifierConfig::default();
        Self {
            master_seed: 42,
            n_runs: 1000,
            out_dir: PathBuf::from("results"),
            dt: 0.01,
            t_total: 2500.0,
            forcing_period: 225.0,
            sigma: 0.3,
            x0: 1.0,
            d_max: 1.2,
            d_min: None,
            d_min_low: 0.25,
            d_min_high: 0.9,
            x_up: det.x_up,
            x_low: det.x_low,
            n_min: det.n_min,
            breakdown_factor: det.breakdown_factor,
            p_buf: feat.p_buf,
            detrend_degree: feat.detrend_degree,
            window_w: feat.window_w,
            phase_std_min_window: feat.phase_std_min_window,
            min_cycles: feat.min_cycles,
            min_jumps: feat.min_jumps,
            k_folds: cls.k_folds,
            permutation_repeats: cls.permutation_repeats,
            svm_lambda: svm.lambda,
            svm_max_iter: svm.max_iter,
            svm_tol: svm.tol,
            svm_eta0: svm.eta0,
            svm_t0: svm.t0,
            fig_levels: vec![1.0, 0.9, 0.8, 0.72],
            fig_level_periods: 8,
            fig_runs: 50,
            fig_breakdown_d_min: 0.25,
            diag_transient_periods: 20,
            diag_floquet_tol: 1e-10,
            diag_delay_periods: 6,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    /// SHA-256 of the resolved configuration, hex encoded. `out_dir` is left
    /// out since it does not affect any result.
    pub fn hash(&self) -> String {
        let canonical = Self {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        Sha256::digest(canonical.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn omega(&self) -> f64 {
        TAU / self.forcing_period
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if !(self.forcing_period > 0.0 && self.forcing_period.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "forcing_period = {}",
                self.forcing_period
            )));
        }
        if self.n_runs == 0 {
            return Err(ConfigError::Invalid("n_runs must be at least 1".into()));
        }
        self.sim_config().validate().map_err(|e| invalid(&e))?;
        self.sampler().validate().map_err(|e| invalid(&e))?;
        if self.d_min.is_none() && self.d_min_high > self.d_max {
            return Err(ConfigError::Invalid(format!(
                "d_min_high = {} exceeds d_max = {}",
                self.d_min_high, self.d_max
            )));
        }
        if let Some(d) = self.d_min {
            if d > self.d_max {
                return Err(ConfigError::Invalid(format!("d_min = {d} exceeds d_max")));
            }
        }
        self.detector().validate().map_err(|e| invalid(&e))?;
        self.features().validate().map_err(|e| invalid(&e))?;
        self.classifier().validate().map_err(|e| invalid(&e))?;
        if self.fig_levels.is_empty() || self.fig_levels.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(ConfigError::Invalid("fig_levels must be positive".into()));
        }
        if self.fig_level_periods == 0 || self.fig_runs == 0 || self.diag_delay_periods < 2 {
            return Err(ConfigError::Invalid(
                "fig_level_periods and fig_runs must be >= 1, diag_delay_periods >= 2".into(),
            ));
        }
        if !(self.fig_breakdown_d_min > 0.0 && self.fig_breakdown_d_min <= self.d_max) {
            return Err(ConfigError::Invalid(format!(
                "fig_breakdown_d_min = {}",
                self.fig_breakdown_d_min
            )));
        }
        Ok(())
    }

    /// Ramp configuration; the end value is replaced per run by the sampler.
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            dt: self.dt,
            t_total: self.t_total,
            omega: self.omega(),
            amplitude_schedule: AmplitudeSchedule::LinearRamp {
                d_max: self.d_max,
                d_min: self.d_min.unwrap_or(self.d_min_low),
            },
            sigma: self.sigma,
            x0: self.x0,
            master_seed: self.master_seed,
        }
    }

    pub fn sampler(&self) -> DminSampler {
        match self.d_min {
            Some(value) => DminSampler::Fixed { value },
            None => DminSampler::Uniform {
                low: self.d_min_low,
                high: self.d_min_high,
            },
        }
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            x_up: self.x_up,
            x_low: self.x_low,
            n_min: self.n_min,
            breakdown_factor: self.breakdown_factor,
        }
    }

    pub fn features(&self) -> FeatureConfig {
        FeatureConfig {
            p_buf: self.p_buf,
            detrend_degree: self.detrend_degree,
            window_w: self.window_w,
            phase_std_min_window: self.phase_std_min_window,
            min_cycles: self.min_cycles,
            min_jumps: self.min_jumps,
        }
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            k_folds: self.k_folds,
            permutation_repeats: self.permutation_repeats,
            svm: SvmHyperparams {
                lambda: self.svm_lambda,
                max_iter: self.svm_max_iter,
                tol: self.svm_tol,
                eta0: self.svm_eta0,
                t0: self.svm_t0,
            },
        }
    }

    /// Piecewise-constant configuration used by the level figures.
    pub fn level_sim_config(&self) -> SimConfig {
        let level_duration = self.fig_level_periods as f64 * self.forcing_period;
        SimConfig {
            t_total: level_duration * self.fig_levels.len() as f64,
            amplitude_schedule: AmplitudeSchedule::PiecewiseConstant {
                levels: self.fig_levels.clone(),
                level_duration,
            },
            ..self.sim_config()
        }
    }
}

/// Detection, labeling and truncation for one trajectory.
pub fn segment_run(traj: &Trajectory, cfg: &ExperimentConfig) -> Result<SegmentSet, EventError> {
    let det = cfg.detector();
    let raw = events::detect_jumps(traj, &det)?;
    let labeled = events::label_breakdown(&raw, cfg.forcing_period, &det);
    Ok(events::truncate_at_onset(&labeled))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub record: FeatureRecord,
    /// `None` when the run diverged before detection.
    pub breakdown: Option<BreakdownSummary>,
    pub n_cycles: usize,
    pub n_jumps: usize,
}

/// Simulates and featurizes ensemble member `run`.
pub fn process_run(cfg: &ExperimentConfig, run: usize) -> Result<RunOutcome, ExperimentError> {
    let sampler = cfg.sampler();
    let (sim_cfg, seed, d_min) = sim::realize_run(&cfg.sim_config(), run, Some(&sampler))?;
    let traj = match sim::simulate(&sim_cfg, seed) {
        Ok(t) => t,
        Err(SimError::Diverged { step, value }) => {
            warn!("run {run} diverged at step {step} (x = {value}); excluded");
            return Ok(RunOutcome {
                record: FeatureRecord {
                    run_id: run,
                    d_min,
                    features: FeatureVector::invalid(false),
                    invalid_reason: Some(InvalidReason::Divergence),
                },
                breakdown: None,
                n_cycles: 0,
                n_jumps: 0,
            });
        }
        Err(e) => return Err(e.into()),
    };
    let segset = segment_run(&traj, cfg)?;
    let ext = features::extract_features(&traj, &segset, &cfg.features(), cfg.omega());
    Ok(RunOutcome {
        record: FeatureRecord {
            run_id: run,
            d_min,
            features: ext.vector,
            invalid_reason: ext.invalid_reason,
        },
        breakdown: Some(segset.breakdown_summary()),
        n_cycles: ext.cycles.cycles.len(),
        n_jumps: segset.jumps.len(),
    })
}

/// All runs, in run-index order regardless of thread count.
pub fn run_ensemble(cfg: &ExperimentConfig) -> Result<Vec<RunOutcome>, ExperimentError> {
    (0..cfg.n_runs)
        .into_par_iter()
        .map(|run| process_run(cfg, run))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub breakdown: usize,
    pub no_breakdown: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Excluded {
    pub too_few_cycles: usize,
    pub too_few_jumps: usize,
    pub divergence: usize,
}

impl Excluded {
    pub fn total(&self) -> usize {
        self.too_few_cycles + self.too_few_jumps + self.divergence
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub run_id: usize,
    pub d_min: Option<f64>,
    pub label: bool,
    pub valid: bool,
    pub invalid_reason: Option<InvalidReason>,
    pub slope_var: f64,
    pub slope_ac1: f64,
    pub slope_jump_phase: f64,
    pub slope_phase_std: f64,
    pub onset_time: Option<f64>,
    pub n_jumps: usize,
    pub n_cycles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
    pub simulation_seed_label: String,
    pub fold_seed: u64,
    pub permutation_seed_label: String,
    pub code_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub n_runs: usize,
    pub n_valid: usize,
    /// Label counts over all non-diverged runs.
    pub labels: ClassCounts,
    /// Label counts over the valid runs that enter classification.
    pub class_counts: ClassCounts,
    pub excluded: Excluded,
    pub classification: Option<ClassificationReport>,
    pub warnings: Vec<String>,
    pub runs: Vec<RunEntry>,
    pub provenance: Provenance,
}

fn provenance(cfg: &ExperimentConfig) -> Provenance {
    Provenance {
        config_hash: cfg.hash(),
        master_seed: cfg.master_seed,
        simulation_seed_label: LABEL_SIMULATION.into(),
        fold_seed: derive_seed(cfg.master_seed, LABEL_FOLDS, 0),
        permutation_seed_label: LABEL_PERMUTATION.into(),
        code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(|source| ExperimentError::OutDir {
        path: dir.display().to_string(),
        source,
    })
}

/// Everything [`run_experiment`] computed, for callers that need more than
/// the written report.
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub dataset: Dataset,
    pub classification: Option<classify::Classification>,
}

/// Builds the report for already-featurized runs and classifies the valid
/// ones. Stratification failures become warnings.
pub fn assemble_report(cfg: &ExperimentConfig, outcomes: &[RunOutcome]) -> Result<ExperimentOutput, ExperimentError> {
    let mut labels = ClassCounts::default();
    let mut class_counts = ClassCounts::default();
    let mut excluded = Excluded::default();
    for o in outcomes {
        let f = &o.record.features;
        if o.breakdown.is_some() {
            if f.label {
                labels.breakdown += 1;
            } else {
                labels.no_breakdown += 1;
            }
        }
        if f.valid {
            if f.label {
                class_counts.breakdown += 1;
            } else {
                class_counts.no_breakdown += 1;
            }
        }
        match o.record.invalid_reason {
            Some(InvalidReason::TooFewCycles) => excluded.too_few_cycles += 1,
            Some(InvalidReason::TooFewJumps) => excluded.too_few_jumps += 1,
            Some(InvalidReason::Divergence) => excluded.divergence += 1,
            None => {}
        }
    }
    let records: Vec<FeatureRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    let dataset = Dataset::from_records(&records)?;
    let mut warnings = Vec::new();
    let classification = match classify::classify(&dataset, &cfg.classifier(), cfg.master_seed) {
        Ok(c) => Some(c),
        Err(e @ (ClassifyError::Stratification { .. } | ClassifyError::SingleClass { .. })) => {
            let msg = format!("classification skipped: {e}");
            warn!("{msg}");
            warnings.push(msg);
            None
        }
        Err(e) => return Err(e.into()),
    };
    let runs = outcomes
        .iter()
        .map(|o| {
            let f = &o.record.features;
            RunEntry {
                run_id: o.record.run_id,
                d_min: o.record.d_min,
                label: f.label,
                valid: f.valid,
                invalid_reason: o.record.invalid_reason,
                slope_var: f.slope_var,
                slope_ac1: f.slope_ac1,
                slope_jump_phase: f.slope_jump_phase,
                slope_phase_std: f.slope_phase_std,
                onset_time: o.breakdown.as_ref().and_then(|b| b.onset_time),
                n_jumps: o.n_jumps,
                n_cycles: o.n_cycles,
            }
        })
        .collect();
    let report = ExperimentReport {
        n_runs: outcomes.len(),
        n_valid: dataset.len(),
        labels,
        class_counts,
        excluded,
        classification: classification.as_ref().map(|c| c.report(&dataset, PCA_FILE)),
        warnings,
        runs,
        provenance: provenance(cfg),
    };
    Ok(ExperimentOutput {
        report,
        dataset,
        classification,
    })
}

pub const FEATURES_FILE: &str = "features.csv";
pub const PCA_FILE: &str = "pca.csv";
pub const REPORT_FILE: &str = "report.json";

/// Runs the full pipeline and writes `features.csv`, `pca.csv` and
/// `report.json` into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutput, ExperimentError> {
    cfg.validate()?;
    ensure_dir(out)?;
    info!("simulating {} runs", cfg.n_runs);
    let outcomes = run_ensemble(cfg)?;
    let records: Vec<FeatureRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    features::write_feature_csv(&out.join(FEATURES_FILE), &records)?;
    info!("classifying");
    let output = assemble_report(cfg, &outcomes)?;
    if let Some(c) = &output.classification {
        classify::write_pca_csv(&out.join(PCA_FILE), &output.dataset, &c.pca)?;
        info!("cv balanced accuracy {:.4}", c.cv.mean);
    }
    io::write_json(&out.join(REPORT_FILE), &output.report)?;
    Ok(output)
}

/// Classification stage alone, on a previously written feature table.
pub fn classify_features(
    cfg: &ExperimentConfig,
    features_csv: &Path,
    out: &Path,
) -> Result<ClassificationReport, ExperimentError> {
    cfg.validate()?;
    ensure_dir(out)?;
    let records = features::read_feature_csv(features_csv)?;
    let data = Dataset::from_records(&records)?;
    let c = classify::classify(&data, &cfg.classifier(), cfg.master_seed)?;
    classify::write_pca_csv(&out.join(PCA_FILE), &data, &c.pca)?;
    let report = c.report(&data, PCA_FILE);
    io::write_json(&out.join("classification.json"), &report)?;
    Ok(report)
}

/// Per-level raw statistics of one piecewise-protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLevels {
    pub run_id: usize,
    /// `vars[l]`, `ac1s[l]`: cycles lying entirely inside level `l`.
    pub vars: Vec<Vec<f64>>,
    pub ac1s: Vec<Vec<f64>>,
    /// Jump phases with the jump time inside level `l`.
    pub deltas: Vec<Vec<f64>>,
    pub breakdown: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelStat {
    pub d_a: f64,
    pub mean_var: f64,
    pub mean_ac1: f64,
    pub mean_delta: f64,
    pub circ_mean_delta: f64,
    pub circ_std_delta: f64,
    pub n_cycles: usize,
    pub n_jumps: usize,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Pools the chosen runs (repeats allowed, for bootstrapping) level by level.
pub fn level_statistics(levels: &[f64], runs: &[RunLevels], picks: &[usize]) -> Vec<LevelStat> {
    (0..levels.len())
        .map(|l| {
            let gather = |f: &dyn Fn(&RunLevels) -> &Vec<Vec<f64>>| -> Vec<f64> {
                picks.iter().flat_map(|&i| f(&runs[i])[l].iter().copied()).collect()
            };
            let vars = gather(&|r| &r.vars);
            let ac1s = gather(&|r| &r.ac1s);
            let deltas = gather(&|r| &r.deltas);
            LevelStat {
                d_a: levels[l],
                mean_var: mean(&vars),
                mean_ac1: mean(&ac1s),
                mean_delta: mean(&deltas),
                circ_mean_delta: if deltas.is_empty() {
                    f64::NAN
                } else {
                    circular_mean(&deltas)
                },
                circ_std_delta: if deltas.is_empty() {
                    f64::NAN
                } else {
                    circular_std(&deltas)
                },
                n_cycles: vars.len(),
                n_jumps: deltas.len(),
            }
        })
        .collect()
}

/// Simulates the piecewise-constant protocol and splits each run's cycle
/// and phase statistics by level.
pub fn level_protocol(cfg: &ExperimentConfig) -> Result<Vec<RunLevels>, ExperimentError> {
    let sim_cfg = cfg.level_sim_config();
    sim_cfg.validate()?;
    let n_levels = cfg.fig_levels.len();
    let level_steps = (cfg.fig_level_periods as f64 * cfg.forcing_period / cfg.dt).round() as usize;
    (0..cfg.fig_runs)
        .into_par_iter()
        .map(|run| {
            let traj = sim::simulate(&sim_cfg, run_seed(cfg.master_seed, run))?;
            let segset = segment_run(&traj, cfg)?;
            let fcfg = cfg.features();
            let cycles = features::cycle_stats(&segset, &traj, &fcfg);
            let phases = features::jump_phases(&segset, cfg.omega());
            let level_of = |i: usize| (i / level_steps).min(n_levels - 1);
            let mut out = RunLevels {
                run_id: run,
                vars: vec![Vec::new(); n_levels],
                ac1s: vec![Vec::new(); n_levels],
                deltas: vec![Vec::new(); n_levels],
                breakdown: segset.is_breakdown(),
            };
            for c in &cycles.cycles {
                let l = level_of(c.start_index);
                if level_of(c.end_index.saturating_sub(1)) == l {
                    out.vars[l].push(c.var);
                    out.ac1s[l].push(c.ac1);
                }
            }
            for (j, p) in segset.jumps.iter().zip(&phases.jumps) {
                out.deltas[level_of(j.index)].push(p.delta);
            }
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionLine {
    /// Decision function `a·pc1 + b·pc2 + c` of the full-data SVM restricted
    /// to the PC plane.
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub explained_variance: [f64; 2],
}

/// Writes the data behind every figure into `out`, including a full
/// experiment run for the class-conditional and PCA panels.
pub fn run_figure_protocols(cfg: &ExperimentConfig, out: &Path) -> Result<(), ExperimentError> {
    cfg.validate()?;
    ensure_dir(out)?;

    info!("breakdown time series");
    let ramp = SimConfig {
        amplitude_schedule: AmplitudeSchedule::LinearRamp {
            d_max: cfg.d_max,
            d_min: cfg.fig_breakdown_d_min,
        },
        ..cfg.sim_config()
    };
    let traj = sim::simulate(&ramp, run_seed(cfg.master_seed, 0))?;
    traj.write_csv(&out.join("breakdown_series.csv"))?;
    let det = cfg.detector();
    let labeled = events::label_breakdown(&events::detect_jumps(&traj, &det)?, cfg.forcing_period, &det);
    labeled.write_events_csv(&out.join("breakdown_events.csv"))?;
    io::write_json(&out.join("breakdown_summary.json"), &labeled.breakdown_summary())?;
    drop(traj);

    info!("piecewise-constant levels ({} runs)", cfg.fig_runs);
    let runs = level_protocol(cfg)?;
    let mut cyc_rows = Vec::new();
    let mut phase_rows = Vec::new();
    for r in &runs {
        for (l, &d_a) in cfg.fig_levels.iter().enumerate() {
            for (v, a) in r.vars[l].iter().zip(&r.ac1s[l]) {
                cyc_rows.push(vec![r.run_id as f64, l as f64, d_a, *v, *a]);
            }
            for d in &r.deltas[l] {
                phase_rows.push(vec![r.run_id as f64, l as f64, d_a, *d]);
            }
        }
    }
    io::write_table(
        &out.join("levels_cycles.csv"),
        &["run_id", "level", "d_a", "var", "ac1"],
        &cyc_rows,
    )?;
    io::write_table(
        &out.join("levels_phases.csv"),
        &["run_id", "level", "d_a", "delta"],
        &phase_rows,
    )?;
    let all: Vec<usize> = (0..runs.len()).collect();
    let stats = level_statistics(&cfg.fig_levels, &runs, &all);
    let rows: Vec<Vec<f64>> = stats
        .iter()
        .enumerate()
        .map(|(l, s)| {
            vec![
                l as f64,
                s.d_a,
                s.mean_var,
                s.mean_ac1,
                s.mean_delta,
                s.circ_mean_delta,
                s.circ_std_delta,
                s.n_cycles as f64,
                s.n_jumps as f64,
            ]
        })
        .collect();
    io::write_table(
        &out.join("levels_summary.csv"),
        &[
            "level",
            "d_a",
            "mean_var",
            "mean_ac1",
            "mean_delta",
            "circ_mean_delta",
            "circ_std_delta",
            "n_cycles",
            "n_jumps",
        ],
        &rows,
    )?;

    info!("classification experiment ({} runs)", cfg.n_runs);
    let output = run_experiment(cfg, out)?;
    let class_rows: Vec<Vec<f64>> = output
        .dataset
        .rows
        .iter()
        .zip(&output.dataset.labels)
        .zip(&output.dataset.run_ids)
        .map(|((r, l), id)| {
            let mut row = vec![*id as f64, f64::from(u8::from(*l))];
            row.extend(r);
            row
        })
        .collect();
    let mut header = vec!["run_id", "label"];
    header.extend(features::FEATURE_NAMES);
    io::write_table(&out.join("class_features.csv"), &header, &class_rows)?;
    if let Some(c) = &output.classification {
        let [a, b, c0] = c.decision_line();
        io::write_json(
            &out.join("decision_line.json"),
            &DecisionLine {
                a,
                b,
                c: c0,
                explained_variance: c.pca.explained_variance,
            },
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub d_a: f64,
    pub omega: f64,
    pub fold_exists: bool,
    pub static_phase_offset: Option<f64>,
    pub beta: Option<f64>,
    pub log_floquet: Option<f64>,
    /// Mean delay phase ω(t_J − t_fold) of the settled deterministic jumps.
    pub measured_delay: Option<f64>,
    /// Mean signed jump phase ω(t_J − t_star) of the same jumps.
    pub measured_psi: Option<f64>,
    pub n_jumps: usize,
}

/// Deterministic jump phases at constant amplitude, from jumps in the second
/// half of a `periods`-period run.
pub fn measured_delay(
    cfg: &ExperimentConfig,
    d_a: f64,
    omega: f64,
    periods: usize,
) -> Result<Vec<geometry::JumpDecomposition>, ExperimentError> {
    let t_f = TAU / omega;
    let sim_cfg = SimConfig {
        t_total: periods as f64 * t_f,
        omega,
        sigma: 0.0,
        amplitude_schedule: AmplitudeSchedule::Constant { d_a },
        ..cfg.sim_config()
    };
    let traj = sim::simulate(&sim_cfg, 0)?;
    let segset = events::detect_jumps(&traj, &cfg.detector())?;
    let settle = (periods / 2) as f64 * t_f;
    Ok(segset
        .jumps
        .iter()
        .filter(|j| j.time >= settle)
        .filter_map(|j| geometry::decompose_jump(j.time, d_a, omega).ok())
        .collect())
}

/// Tabulates closed-form geometry, the Floquet multiplier and the measured
/// deterministic delay over a grid of amplitudes and rates.
pub fn diagnose_geometry(
    cfg: &ExperimentConfig,
    d_as: &[f64],
    omegas: &[f64],
) -> Result<Vec<DiagnosticRow>, ExperimentError> {
    let grid: Vec<(f64, f64)> = d_as.iter().flat_map(|&d| omegas.iter().map(move |&w| (d, w))).collect();
    grid.into_par_iter()
        .map(|(d_a, omega)| {
            let base = SimConfig {
                sigma: 0.0,
                ..cfg.sim_config()
            };
            let g = GeometryReport::evaluate(&base, d_a, omega, cfg.diag_transient_periods, cfg.diag_floquet_tol);
            let jumps = if d_a > FOLD_FORCING {
                measured_delay(cfg, d_a, omega, cfg.diag_delay_periods)?
            } else {
                Vec::new()
            };
            let avg = |f: &dyn Fn(&geometry::JumpDecomposition) -> f64| {
                (!jumps.is_empty()).then(|| jumps.iter().map(f).sum::<f64>() / jumps.len() as f64)
            };
            Ok(DiagnosticRow {
                d_a,
                omega,
                fold_exists: g.fold_exists,
                static_phase_offset: g.static_phase_offset,
                beta: g.beta,
                log_floquet: g.log_floquet,
                measured_delay: avg(&|j| j.phi),
                measured_psi: avg(&|j| j.psi),
                n_jumps: jumps.len(),
            })
        })
        .collect()
}

pub fn write_diagnostics_csv(path: &Path, rows: &[DiagnosticRow]) -> Result<(), IoError> {
    let mut w = io::csv_writer(path)?;
    let err = io::csv_err(path);
    w.write_record([
        "d_a",
        "omega",
        "fold_exists",
        "static_phase_offset",
        "beta",
        "log_floquet",
        "measured_delay",
        "measured_psi",
        "n_jumps",
    ])
    .map_err(&err)?;
    let opt = |v: Option<f64>| v.map(io::fmt_f64).unwrap_or_default();
    for r in rows {
        w.write_record([
            io::fmt_f64(r.d_a),
            io::fmt_f64(r.omega),
            r.fold_exists.to_string(),
            opt(r.static_phase_offset),
            opt(r.beta),
            opt(r.log_floquet),
            opt(r.measured_delay),
            opt(r.measured_psi),
            r.n_jumps.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Simulates one run of the experiment ensemble and writes its trajectory,
/// events and breakdown summary.
pub fn simulate_single(cfg: &ExperimentConfig, run: usize, out: &Path) -> Result<BreakdownSummary, ExperimentError> {
    cfg.validate()?;
    ensure_dir(out)?;
    let (sim_cfg, seed, _) = sim::realize_run(&cfg.sim_config(), run, Some(&cfg.sampler()))?;
    let traj = sim::simulate(&sim_cfg, seed)?;
    traj.write_csv(&out.join(format!("trajectory_{run}.csv")))?;
    let det = cfg.detector();
    let labeled = events::label_breakdown(&events::detect_jumps(&traj, &det)?, cfg.forcing_period, &det);
    labeled.write_events_csv(&out.join(format!("events_{run}.csv")))?;
    let summary = labeled.breakdown_summary();
    io::write_json(&out.join(format!("breakdown_{run}.json")), &summary)?;
    Ok(summary)
}

/// Featurizes every run and writes only the feature table.
pub fn extract_feature_table(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<FeatureRecord>, ExperimentError> {
    cfg.validate()?;
    ensure_dir(out)?;
    let records: Vec<FeatureRecord> = run_ensemble(cfg)?.into_iter().map(|o| o.record).collect();
    features::write_feature_csv(&out.join(FEATURES_FILE), &records)?;
    Ok(records)
}
