//! Euler–Maruyama simulation of the periodically forced overdamped Duffing
//! oscillator
//!
//! ```text
//! dx = (x − x³/3 + D_a(t)·cos(ωt)) dt + σ dW
//! ```
//!
//! on the uniform grid `t_n = n·dt`, with the amplitude `D_a` held constant,
//! ramped linearly or switched between piecewise-constant levels.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, IoError};
use crate::seeds::{self, NormalStream};

/// States with magnitude above this abort the run.
pub const DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("time {t} outside [0, {t_total}]")]
    TimeOutOfRange { t: f64, t_total: f64 },
    #[error("trajectory diverged at step {step} (x = {value})")]
    Diverged { step: usize, value: f64 },
    #[error("run {run}: {source}")]
    Run {
        run: usize,
        #[source]
        source: Box<SimError>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AmplitudeSchedule {
    Constant { d_a: f64 },
    LinearRamp { d_max: f64, d_min: f64 },
    PiecewiseConstant { levels: Vec<f64>, level_duration: f64 },
}

impl AmplitudeSchedule {
    fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        match self {
            Self::Constant { d_a } if !d_a.is_finite() => bad(format!("d_a = {d_a}")),
            Self::LinearRamp { d_max, d_min } => {
                if !(d_max.is_finite() && d_min.is_finite() && *d_max >= *d_min && *d_min > 0.0) {
                    bad(format!("linear ramp needs d_max >= d_min > 0, got {d_max}, {d_min}"))
                } else {
                    Ok(())
                }
            }
            Self::PiecewiseConstant { levels, level_duration } => {
                if levels.is_empty() || levels.iter().any(|l| !l.is_finite()) {
                    bad("piecewise schedule needs finite levels".into())
                } else if !(*level_duration > 0.0 && level_duration.is_finite()) {
                    bad(format!("level_duration = {level_duration}"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Level index active at time `t` for a piecewise schedule; `None` otherwise.
    pub fn level_index(&self, t: f64) -> Option<usize> {
        match self {
            Self::PiecewiseConstant { levels, level_duration } => {
                let k = (t / level_duration).floor();
                Some((k.max(0.0) as usize).min(levels.len() - 1))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub t_total: f64,
    pub omega: f64,
    pub amplitude_schedule: AmplitudeSchedule,
    pub sigma: f64,
    pub x0: f64,
    pub master_seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.t_total > 0.0 && self.t_total.is_finite()) {
            return bad(format!("t_total must be positive, got {}", self.t_total));
        }
        let ratio = self.t_total / self.dt;
        if (ratio - ratio.round()).abs() > 4.0 * f64::EPSILON * ratio.max(1.0) {
            return bad(format!("t_total / dt = {ratio} is not a whole number of steps"));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return bad(format!("omega must be positive, got {}", self.omega));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if !self.x0.is_finite() {
            return bad(format!("x0 = {}", self.x0));
        }
        self.amplitude_schedule.validate()
    }

    /// Number of Euler steps `N`; the grid has `N + 1` points.
    pub fn n_steps(&self) -> usize {
        (self.t_total / self.dt).round() as usize
    }

    pub fn forcing_period(&self) -> f64 {
        std::f64::consts::TAU / self.omega
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub d_a: Vec<f64>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Grid spacing, recovered from the first step.
    pub fn dt(&self) -> f64 {
        if self.t.len() < 2 {
            0.0
        } else {
            self.t[1] - self.t[0]
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), IoError> {
        let mut w = io::csv_writer(path)?;
        let err = io::csv_err(path);
        w.write_record(["t", "x", "d_a"]).map_err(&err)?;
        for i in 0..self.len() {
            w.write_record([io::fmt_f64(self.t[i]), io::fmt_f64(self.x[i]), io::fmt_f64(self.d_a[i])])
                .map_err(&err)?;
        }
        w.flush().map_err(|source| IoError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Reads a trajectory written by [`Trajectory::write_csv`]; the seed is not stored.
    pub fn read_csv(path: &Path, seed: u64) -> Result<Self, IoError> {
        let mut r = io::csv_reader(path)?;
        let (mut t, mut x, mut d_a) = (Vec::new(), Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec.map_err(io::csv_err(path))?;
            if rec.len() != 3 {
                return Err(IoError::Malformed {
                    path: path.display().to_string(),
                    message: format!("expected 3 fields, got {}", rec.len()),
                });
            }
            t.push(io::parse_f64(path, &rec[0])?);
            x.push(io::parse_f64(path, &rec[1])?);
            d_a.push(io::parse_f64(path, &rec[2])?);
        }
        Ok(Self { t, x, d_a, seed })
    }
}

/// Deterministic drift `x − x³/3 + d_a·cos(ωt)`.
#[inline]
pub fn drift(x: f64, t: f64, d_a: f64, omega: f64) -> f64 {
    x - x * x * x / 3.0 + d_a * (omega * t).cos()
}

pub fn amplitude_at(schedule: &AmplitudeSchedule, t: f64, t_total: f64) -> Result<f64, SimError> {
    if !(0.0..=t_total).contains(&t) {
        return Err(SimError::TimeOutOfRange { t, t_total });
    }
    Ok(match schedule {
        AmplitudeSchedule::Constant { d_a } => *d_a,
        AmplitudeSchedule::LinearRamp { d_max, d_min } => d_max - (d_max - d_min) * t / t_total,
        AmplitudeSchedule::PiecewiseConstant { levels, .. } => {
            // level_index is Some for this variant
            levels[schedule.level_index(t).unwrap_or(0)]
        }
    })
}

/// Integrates one path with the noise stream keyed by `run_seed`.
pub fn simulate(config: &SimConfig, run_seed: u64) -> Result<Trajectory, SimError> {
    config.validate()?;
    let n = config.n_steps();
    let dt = config.dt;
    let t: Vec<f64> = (0..=n).map(|i| i as f64 * dt).collect();
    // grid times never exceed t_total by more than rounding, clamp for the range check
    let d_a = t
        .iter()
        .map(|&ti| amplitude_at(&config.amplitude_schedule, ti.min(config.t_total), config.t_total))
        .collect::<Result<Vec<_>, _>>()?;

    let noise_scale = config.sigma * dt.sqrt();
    let mut noise = NormalStream::new(run_seed);
    let mut x = Vec::with_capacity(n + 1);
    x.push(config.x0);
    let mut xi = config.x0;
    for i in 0..n {
        let mut next = xi + drift(xi, t[i], d_a[i], config.omega) * dt;
        if noise_scale > 0.0 {
            next += noise_scale * noise.next_normal();
        }
        if !next.is_finite() || next.abs() > DIVERGENCE_BOUND {
            return Err(SimError::Diverged {
                step: i + 1,
                value: next,
            });
        }
        x.push(next);
        xi = next;
    }
    Ok(Trajectory {
        t,
        x,
        d_a,
        seed: run_seed,
    })
}

/// Distribution of the per-run final ramp amplitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DminSampler {
    Fixed { value: f64 },
    Uniform { low: f64, high: f64 },
}

impl DminSampler {
    pub fn validate(&self) -> Result<(), SimError> {
        let ok = match self {
            Self::Fixed { value } => *value > 0.0 && value.is_finite(),
            Self::Uniform { low, high } => *low > 0.0 && high.is_finite() && low <= high,
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidConfig(format!("bad d_min sampler {self:?}")))
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Fixed { value } => *value,
            Self::Uniform { low, high } => {
                if low == high {
                    *low
                } else {
                    rng.random_range(*low..=*high)
                }
            }
        }
    }
}

/// Per-run configuration of ensemble member `run`: its seed and, when a
/// sampler is given, the ramp end value drawn from stream 1 of that seed.
pub fn realize_run(
    config: &SimConfig,
    run: usize,
    sampler: Option<&DminSampler>,
) -> Result<(SimConfig, u64, Option<f64>), SimError> {
    let seed = seeds::run_seed(config.master_seed, run);
    let Some(sampler) = sampler else {
        return Ok((config.clone(), seed, None));
    };
    let AmplitudeSchedule::LinearRamp { d_max, .. } = config.amplitude_schedule else {
        return Err(SimError::InvalidConfig(
            "a d_min sampler requires a linear_ramp schedule".into(),
        ));
    };
    let mut rng = seeds::stream_rng(seed, 1);
    let d_min = sampler.sample(&mut rng);
    let mut cfg = config.clone();
    cfg.amplitude_schedule = AmplitudeSchedule::LinearRamp { d_max, d_min };
    Ok((cfg, seed, Some(d_min)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRun {
    pub run: usize,
    pub trajectory: Trajectory,
    pub d_min: Option<f64>,
}

/// Simulates `n_runs` members in parallel; output is in run-index order.
pub fn simulate_ensemble(
    config: &SimConfig,
    n_runs: usize,
    sampler: Option<&DminSampler>,
) -> Result<Vec<EnsembleRun>, SimError> {
    if n_runs == 0 {
        return Err(SimError::InvalidConfig("n_runs must be at least 1".into()));
    }
    config.validate()?;
    if let Some(s) = sampler {
        s.validate()?;
    }
    (0..n_runs)
        .into_par_iter()
        .map(|run| {
            let wrap = |e: SimError| SimError::Run {
                run,
                source: Box::new(e),
            };
            let (cfg, seed, d_min) = realize_run(config, run, sampler).map_err(wrap)?;
            let trajectory = simulate(&cfg, seed).map_err(wrap)?;
            Ok(EnsembleRun { run, trajectory, d_min })
        })
        .collect()
}
