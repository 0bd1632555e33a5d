//! Cycle-aware indicators.
//!
//! Fluctuation indicators come from detrended residuals on between-jump
//! segments, paired into forcing cycles. Phase indicators come from the
//! forcing phase of each jump relative to the nearest forcing extremum.
//! Each run is reduced to four OLS trend slopes.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::SegmentSet;
use crate::io::{self, IoError};
use crate::sim::Trajectory;

/// Floor applied to the mean resultant length before taking the logarithm.
pub const MIN_RESULTANT_LENGTH: f64 = 1e-12;

pub const FEATURE_NAMES: [&str; 4] = ["slope_var", "slope_ac1", "slope_jump_phase", "slope_phase_std"];

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("need at least {needed} samples after buffering, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("slope needs at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("invalid feature config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub p_buf: f64,
    pub detrend_degree: usize,
    pub window_w: usize,
    /// Smallest trailing window used for the phase-dispersion series. Windows
    /// near the start of a run hold fewer than `window_w` jumps; setting this
    /// to `window_w` keeps full windows only.
    pub phase_std_min_window: usize,
    pub min_cycles: usize,
    pub min_jumps: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            p_buf: 0.05,
            detrend_degree: 3,
            window_w: 16,
            phase_std_min_window: 2,
            min_cycles: 5,
            min_jumps: 5,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if !(0.0..0.5).contains(&self.p_buf) {
            return Err(FeatureError::InvalidConfig(format!("p_buf = {}", self.p_buf)));
        }
        if self.window_w < 2 {
            return Err(FeatureError::InvalidConfig(format!("window_w = {}", self.window_w)));
        }
        if self.phase_std_min_window == 0 || self.phase_std_min_window > self.window_w {
            return Err(FeatureError::InvalidConfig(format!(
                "phase_std_min_window = {} must lie in 1..={}",
                self.phase_std_min_window, self.window_w
            )));
        }
        if self.min_cycles < 2 || self.min_jumps < 2 {
            return Err(FeatureError::InvalidConfig(
                "min_cycles and min_jumps must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// Principal value in `(−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let r = theta.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Least-squares polynomial fit of `values` against their index; returns
/// the residuals.
fn polynomial_residuals(values: &[f64], degree: usize) -> Vec<f64> {
    let m = values.len();
    // abscissa mapped to [-1, 1]; the fit is invariant under this affine change
    let scale = if m > 1 { 2.0 / (m - 1) as f64 } else { 0.0 };
    let design = DMatrix::from_fn(m, degree + 1, |i, k| (i as f64 * scale - 1.0).powi(k as i32));
    let y = DVector::from_column_slice(values);
    let qr = design.clone().qr();
    let qty = qr.q().transpose() * &y;
    let coef = qr
        .r()
        .solve_upper_triangular(&qty)
        .unwrap_or_else(|| DVector::zeros(degree + 1));
    let fitted = &design * coef;
    values.iter().zip(fitted.iter()).map(|(v, f)| v - f).collect()
}

/// Drops `floor(p_buf·n)` samples at each end and removes a least-squares
/// polynomial trend of `detrend_degree` from the rest.
pub fn detrend_segment(samples: &[f64], fcfg: &FeatureConfig) -> Result<Vec<f64>, FeatureError> {
    let n = samples.len();
    let buf = (fcfg.p_buf * n as f64).floor() as usize;
    let interior = if 2 * buf < n { &samples[buf..n - buf] } else { &[][..] };
    let needed = fcfg.detrend_degree + 2;
    if interior.len() < needed {
        return Err(FeatureError::TooFewSamples {
            needed,
            got: interior.len(),
        });
    }
    Ok(polynomial_residuals(interior, fcfg.detrend_degree))
}

/// Sample variance with the `n − 1` normalization.
pub fn sample_variance(y: &[f64]) -> f64 {
    let n = y.len();
    if n < 2 {
        return 0.0;
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// Lag-1 autocorrelation `Σ(yᵢ−ȳ)(yᵢ₊₁−ȳ) / Σ(yᵢ−ȳ)²`; `None` for a
/// constant or too-short series.
pub fn lag1_autocorrelation(y: &[f64]) -> Option<f64> {
    let n = y.len();
    if n < 2 {
        return None;
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let denom: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if denom == 0.0 {
        return None;
    }
    let num: f64 = y.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
    Some((num / denom).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleStats {
    /// Position of the cycle among the run's cycles (0-based).
    pub cycle_index: usize,
    pub var: f64,
    pub ac1: f64,
    pub sample_count: usize,
    /// First grid index of the cycle's first segment.
    pub start_index: usize,
    /// End grid index (exclusive) of the cycle's second segment.
    pub end_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CycleReport {
    pub cycles: Vec<CycleStats>,
    /// Cycles dropped because a segment was too short or the residuals constant.
    pub skipped: usize,
}

/// Pairs consecutive segments into cycles and computes variance and AC1 of
/// the concatenated residuals. A trailing unpaired segment is ignored.
pub fn cycle_stats(segset: &SegmentSet, traj: &Trajectory, fcfg: &FeatureConfig) -> CycleReport {
    let mut report = CycleReport::default();
    for (n, pair) in segset.segments.chunks_exact(2).enumerate() {
        let mut residuals = Vec::new();
        let mut ok = true;
        for seg in pair {
            match detrend_segment(&traj.x[seg.start..seg.end], fcfg) {
                Ok(r) => residuals.extend(r),
                Err(_) => ok = false,
            }
        }
        let ac1 = if ok { lag1_autocorrelation(&residuals) } else { None };
        match ac1 {
            Some(ac1) => report.cycles.push(CycleStats {
                cycle_index: n,
                var: sample_variance(&residuals),
                ac1,
                sample_count: residuals.len(),
                start_index: pair[0].start,
                end_index: pair[1].end,
            }),
            None => report.skipped += 1,
        }
    }
    report
}

/// OLS slope of `values` against their 0-based index.
pub fn ols_slope(values: &[f64]) -> Result<f64, FeatureError> {
    let n = values.len();
    if n < 2 {
        return Err(FeatureError::TooFewValues(n));
    }
    let x_mean = (n - 1) as f64 / 2.0;
    let y_mean = values.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in values.iter().enumerate() {
        let dx = i as f64 - x_mean;
        sxy += dx * (v - y_mean);
        sxx += dx * dx;
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpPhase {
    /// Ordinal of the jump within the run (0-based).
    pub k: usize,
    pub time: f64,
    /// Forcing phase in `[0, 2π)`.
    pub phi: f64,
    /// Nearest extremum phase, 0 or π.
    pub extremum: f64,
    /// Signed phase difference in `(−π, π]`.
    pub delta: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseSeries {
    pub jumps: Vec<JumpPhase>,
}

impl PhaseSeries {
    pub fn deltas(&self) -> Vec<f64> {
        self.jumps.iter().map(|j| j.delta).collect()
    }
}

/// Phase of a jump at time `t` relative to the nearest extremum of cos(ωt).
pub fn jump_phase(k: usize, t: f64, omega: f64) -> JumpPhase {
    let phi = (omega * t).rem_euclid(TAU);
    let d_max = wrap_angle(phi).abs();
    let d_min = wrap_angle(phi - PI).abs();
    let extremum = if d_max < d_min {
        0.0
    } else if d_min < d_max {
        PI
    } else if phi < PI {
        // tie: the extremum earlier in time
        0.0
    } else {
        PI
    };
    JumpPhase {
        k,
        time: t,
        phi,
        extremum,
        delta: wrap_angle(phi - extremum),
    }
}

pub fn jump_phases(segset: &SegmentSet, omega: f64) -> PhaseSeries {
    PhaseSeries {
        jumps: segset
            .jumps
            .iter()
            .enumerate()
            .map(|(k, j)| jump_phase(k, j.time, omega))
            .collect(),
    }
}

/// Mean resultant length of unit phasors at the given angles.
pub fn mean_resultant_length(angles: &[f64]) -> f64 {
    if angles.is_empty() {
        return 0.0;
    }
    // Rotating by the first angle leaves R unchanged and makes identical
    // angles give exactly 1.
    let a0 = angles[0];
    let (mut c, mut s) = (0.0, 0.0);
    for a in angles {
        let (sn, cs) = (a - a0).sin_cos();
        c += cs;
        s += sn;
    }
    let n = angles.len() as f64;
    (c / n).hypot(s / n).min(1.0)
}

/// Circular standard deviation `√(−2 ln R)`, with `R` floored at 1e−12.
pub fn circular_std(deltas: &[f64]) -> f64 {
    let r = mean_resultant_length(deltas).max(MIN_RESULTANT_LENGTH);
    (-2.0 * r.ln()).max(0.0).sqrt()
}

/// Circular mean direction (angle of the mean phasor).
pub fn circular_mean(deltas: &[f64]) -> f64 {
    let (c, s) = deltas.iter().fold((0.0, 0.0), |(c, s), a| {
        let (sn, cs) = a.sin_cos();
        (c + cs, s + sn)
    });
    s.atan2(c)
}

/// Right-aligned rolling circular std; entry `i` covers jumps
/// `i ..= i + window_w − 1`. Empty when there are fewer than `window_w` jumps.
pub fn rolling_circ_std(deltas: &[f64], window_w: usize) -> Vec<f64> {
    if window_w == 0 || deltas.len() < window_w {
        return Vec::new();
    }
    deltas.windows(window_w).map(circular_std).collect()
}

/// Circular std over trailing windows of at most `window_w` jumps. Entry `i`
/// ends at jump `i + min_window − 1`; windows shorter than `window_w` occur
/// only at the start of the series.
pub fn trailing_circ_std(deltas: &[f64], window_w: usize, min_window: usize) -> Vec<f64> {
    let min_window = min_window.clamp(1, window_w.max(1));
    (min_window.saturating_sub(1)..deltas.len())
        .map(|j| circular_std(&deltas[(j + 1).saturating_sub(window_w)..=j]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    TooFewCycles,
    TooFewJumps,
    Divergence,
}

impl InvalidReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TooFewCycles => "too_few_cycles",
            Self::TooFewJumps => "too_few_jumps",
            Self::Divergence => "divergence",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub slope_var: f64,
    pub slope_ac1: f64,
    pub slope_jump_phase: f64,
    pub slope_phase_std: f64,
    pub label: bool,
    pub valid: bool,
}

impl FeatureVector {
    pub fn invalid(label: bool) -> Self {
        Self {
            slope_var: f64::NAN,
            slope_ac1: f64::NAN,
            slope_jump_phase: f64::NAN,
            slope_phase_std: f64::NAN,
            label,
            valid: false,
        }
    }

    /// Slopes in the fixed column order of [`FEATURE_NAMES`].
    pub fn slopes(&self) -> [f64; 4] {
        [
            self.slope_var,
            self.slope_ac1,
            self.slope_jump_phase,
            self.slope_phase_std,
        ]
    }
}

/// Everything computed for one run on the way to its feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtraction {
    pub vector: FeatureVector,
    pub invalid_reason: Option<InvalidReason>,
    pub cycles: CycleReport,
    pub phases: PhaseSeries,
    pub rolling_std: Vec<f64>,
}

/// Computes the four trend slopes from a (truncated) segment set.
pub fn extract_features(traj: &Trajectory, segset: &SegmentSet, fcfg: &FeatureConfig, omega: f64) -> FeatureExtraction {
    let label = segset.is_breakdown();
    let cycles = cycle_stats(segset, traj, fcfg);
    let phases = jump_phases(segset, omega);
    let deltas = phases.deltas();
    let rolling_std = trailing_circ_std(&deltas, fcfg.window_w, fcfg.phase_std_min_window);

    let reason = if cycles.cycles.len() < fcfg.min_cycles {
        Some(InvalidReason::TooFewCycles)
    } else if deltas.len() < fcfg.min_jumps || rolling_std.len() < fcfg.min_jumps {
        Some(InvalidReason::TooFewJumps)
    } else {
        None
    };

    let vector = if reason.is_some() {
        FeatureVector::invalid(label)
    } else {
        let vars: Vec<f64> = cycles.cycles.iter().map(|c| c.var).collect();
        let ac1s: Vec<f64> = cycles.cycles.iter().map(|c| c.ac1).collect();
        // lengths were checked above, so every slope is defined
        let slope = |v: &[f64]| ols_slope(v).unwrap_or(f64::NAN);
        let v = FeatureVector {
            slope_var: slope(&vars),
            slope_ac1: slope(&ac1s),
            slope_jump_phase: slope(&deltas),
            slope_phase_std: slope(&rolling_std),
            label,
            valid: true,
        };
        if v.slopes().iter().all(|s| s.is_finite()) {
            v
        } else {
            FeatureVector::invalid(label)
        }
    };
    let invalid_reason = match (reason, vector.valid) {
        (Some(r), _) => Some(r),
        (None, false) => Some(InvalidReason::TooFewCycles),
        (None, true) => None,
    };
    FeatureExtraction {
        vector,
        invalid_reason,
        cycles,
        phases,
        rolling_std,
    }
}

/// One row of the per-run feature table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub run_id: usize,
    pub d_min: Option<f64>,
    pub features: FeatureVector,
    pub invalid_reason: Option<InvalidReason>,
}

const RECORD_HEADER: [&str; 8] = [
    "run_id",
    "d_min",
    "slope_var",
    "slope_ac1",
    "slope_jump_phase",
    "slope_phase_std",
    "label",
    "valid",
];

pub fn write_feature_csv(path: &Path, records: &[FeatureRecord]) -> Result<(), IoError> {
    let mut w = io::csv_writer(path)?;
    let err = io::csv_err(path);
    w.write_record(RECORD_HEADER).map_err(&err)?;
    for r in records {
        let f = &r.features;
        let mut row = vec![r.run_id.to_string(), r.d_min.map(io::fmt_f64).unwrap_or_default()];
        row.extend(f.slopes().iter().map(|v| io::fmt_f64(*v)));
        row.push(f.label.to_string());
        row.push(f.valid.to_string());
        w.write_record(&row).map_err(&err)?;
    }
    w.flush().map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_feature_csv(path: &Path) -> Result<Vec<FeatureRecord>, IoError> {
    let malformed = |message: String| IoError::Malformed {
        path: path.display().to_string(),
        message,
    };
    let mut r = io::csv_reader(path)?;
    let header = r.headers().map_err(io::csv_err(path))?.clone();
    if header.iter().collect::<Vec<_>>() != RECORD_HEADER {
        return Err(malformed(format!("unexpected header {header:?}")));
    }
    let parse_bool = |s: &str| match s {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(malformed(format!("bad boolean {other:?}"))),
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(io::csv_err(path))?;
        if rec.len() != RECORD_HEADER.len() {
            return Err(malformed(format!("row has {} fields", rec.len())));
        }
        let run_id = rec[0].parse().map_err(|e| malformed(format!("bad run_id: {e}")))?;
        let d_min = if rec[1].is_empty() {
            None
        } else {
            Some(io::parse_f64(path, &rec[1])?)
        };
        let features = FeatureVector {
            slope_var: io::parse_f64(path, &rec[2])?,
            slope_ac1: io::parse_f64(path, &rec[3])?,
            slope_jump_phase: io::parse_f64(path, &rec[4])?,
            slope_phase_std: io::parse_f64(path, &rec[5])?,
            label: parse_bool(&rec[6])?,
            valid: parse_bool(&rec[7])?,
        };
        out.push(FeatureRecord {
            run_id,
            d_min,
            features,
            invalid_reason: None,
        });
    }
    Ok(out)
}
