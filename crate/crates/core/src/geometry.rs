//! Fast–slow geometry of the forced Duffing oscillator.
//!
//! With the forcing phase `s = ωt` as slow variable, the critical manifold is
//! the zero set of `f(x, s) = x − x³/3 + D_a·cos s`. It folds when the forcing
//! reaches `±2/3`, which requires `D_a ≥ 2/3`. This module collects the closed-form
//! quantities attached to that fold (phase offset, sweep rate, delay and
//! hazard-window scalings), the decomposition of a jump phase into offset and
//! delay, and a quadrature estimate of the Floquet multiplier of the
//! deterministic jumping orbit.

use std::f64::consts::{FRAC_PI_3, PI};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, IoError};
use crate::sim::{self, AmplitudeSchedule, SimConfig};

/// Forcing value at which the critical manifold folds.
pub const FOLD_FORCING: f64 = 2.0 / 3.0;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("no fold for d_a = {d_a} (requires d_a >= 2/3)")]
    NoFold { d_a: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("orbit not periodic within tolerance {tol} after {periods} periods (residual {residual})")]
    NotConverged { periods: usize, tol: f64, residual: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldInfo {
    pub exists: bool,
    pub fold_forcing_value: f64,
    pub static_phase_offset: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloquetEstimate {
    pub multiplier: f64,
    pub log_multiplier: f64,
    pub periods_integrated: usize,
    pub transient_periods: usize,
}

fn cubic(x: f64, c: f64) -> f64 {
    x - x * x * x / 3.0 + c
}

fn newton_polish(mut x: f64, c: f64) -> f64 {
    for _ in 0..8 {
        let fp = 1.0 - x * x;
        // derivative vanishes at a double root; the closed form is already exact there
        if fp.abs() < 1e-6 {
            break;
        }
        let step = cubic(x, c) / fp;
        x -= step;
        if step.abs() < 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

/// Real roots of `x − x³/3 + d_a·cos s = 0`, ascending, with a double root
/// reported once.
pub fn critical_manifold_roots(s: f64, d_a: f64) -> Vec<f64> {
    let c = d_a * s.cos();
    // x³ − 3x − 3c = 0; with x = 2y this is 4y³ − 3y = 3c/2.
    let arg = 1.5 * c;
    let mut roots = if arg.abs() <= 1.0 {
        let base = arg.acos() / 3.0;
        vec![
            2.0 * base.cos(),
            2.0 * (base - 2.0 * FRAC_PI_3).cos(),
            2.0 * (base + 2.0 * FRAC_PI_3).cos(),
        ]
    } else {
        vec![2.0 * arg.signum() * (arg.abs().acosh() / 3.0).cosh()]
    };
    for r in roots.iter_mut() {
        *r = newton_polish(*r, c);
    }
    roots.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::with_capacity(3);
    for r in roots {
        match out.last_mut() {
            Some(prev) if (r - *prev).abs() < 1e-6 => *prev = 0.5 * (*prev + r),
            _ => out.push(r),
        }
    }
    out
}

pub fn fold_info(d_a: f64) -> FoldInfo {
    let exists = d_a >= FOLD_FORCING;
    FoldInfo {
        exists,
        fold_forcing_value: FOLD_FORCING,
        static_phase_offset: exists.then(|| static_phase_offset_unchecked(d_a)),
    }
}

fn static_phase_offset_unchecked(d_a: f64) -> f64 {
    -(2.0 / (3.0 * d_a)).min(1.0).acos()
}

/// Phase of the fold relative to its forcing extremum, `−arccos(2/(3·d_a))`.
pub fn static_phase_offset(d_a: f64) -> Result<f64, GeometryError> {
    if d_a >= FOLD_FORCING {
        Ok(static_phase_offset_unchecked(d_a))
    } else {
        Err(GeometryError::NoFold { d_a })
    }
}

/// Rate at which the forcing sweeps through the fold value,
/// `d_a·ω·√(1 − 4/(9·d_a²))`.
pub fn fold_sweep_rate(d_a: f64, omega: f64) -> Result<f64, GeometryError> {
    if d_a < FOLD_FORCING {
        return Err(GeometryError::NoFold { d_a });
    }
    let inner = (1.0 - 4.0 / (9.0 * d_a * d_a)).max(0.0);
    Ok(d_a * omega * inner.sqrt())
}

/// Slow-passage delay phase `c·ω^{2/3}·(d_a·√(1 − 4/(9·d_a²)))^{−1/3}`.
pub fn predicted_delay_phase(d_a: f64, omega: f64, c: f64) -> Result<f64, GeometryError> {
    if d_a <= FOLD_FORCING {
        return Err(GeometryError::NoFold { d_a });
    }
    if !(c > 0.0) {
        return Err(GeometryError::Domain(format!("prefactor c = {c}")));
    }
    let g = d_a * (1.0 - 4.0 / (9.0 * d_a * d_a)).sqrt();
    Ok(c * omega.powf(2.0 / 3.0) * g.powf(-1.0 / 3.0))
}

/// Width `σ^{4/3}/β` of the window in which noise-induced escape near the
/// fold is likely.
pub fn hazard_window_width(sigma: f64, beta: f64) -> Result<f64, GeometryError> {
    if !(beta > 0.0) {
        return Err(GeometryError::Domain(format!("beta = {beta}")));
    }
    if sigma < 0.0 {
        return Err(GeometryError::Domain(format!("sigma = {sigma}")));
    }
    Ok(sigma.powf(4.0 / 3.0) / beta)
}

/// Floquet multiplier of the deterministic jumping orbit.
///
/// Integrates period by period with the simulator's Euler scheme until two
/// consecutive periods agree to `tol` in sup norm (no earlier than after
/// `transient_periods`), then evaluates `∫(1 − x²) dt` over the last period
/// by the trapezoidal rule on the grid.
pub fn floquet_multiplier(
    config: &SimConfig,
    transient_periods: usize,
    tol: f64,
) -> Result<FloquetEstimate, GeometryError> {
    floquet_multiplier_with_budget(config, transient_periods, tol, transient_periods + 50)
}

pub fn floquet_multiplier_with_budget(
    config: &SimConfig,
    transient_periods: usize,
    tol: f64,
    max_periods: usize,
) -> Result<FloquetEstimate, GeometryError> {
    let AmplitudeSchedule::Constant { d_a } = config.amplitude_schedule else {
        return Err(GeometryError::Domain(
            "floquet multiplier needs a constant amplitude".into(),
        ));
    };
    if config.sigma != 0.0 {
        return Err(GeometryError::Domain("floquet multiplier needs sigma = 0".into()));
    }
    if d_a <= FOLD_FORCING {
        return Err(GeometryError::NoFold { d_a });
    }
    if !(config.dt > 0.0 && config.omega > 0.0) {
        return Err(GeometryError::Domain("dt and omega must be positive".into()));
    }
    let dt = config.dt;
    let steps = (config.forcing_period() / dt).round() as usize;
    if steps < 2 {
        return Err(GeometryError::Domain("forcing period shorter than two steps".into()));
    }

    let mut x = config.x0;
    let mut prev: Vec<f64> = Vec::new();
    let mut cur: Vec<f64> = Vec::with_capacity(steps + 1);
    let mut residual = f64::INFINITY;
    for period in 0..max_periods.max(1) {
        cur.clear();
        cur.push(x);
        let offset = period * steps;
        for j in 0..steps {
            let t = (offset + j) as f64 * dt;
            x += sim::drift(x, t, d_a, config.omega) * dt;
            cur.push(x);
        }
        if !x.is_finite() {
            return Err(GeometryError::Domain(format!("orbit diverged in period {period}")));
        }
        if !prev.is_empty() {
            residual = prev.iter().zip(&cur).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if period >= transient_periods && residual < tol {
                let integrand = |v: f64| 1.0 - v * v;
                let log_mu = dt
                    * cur
                        .windows(2)
                        .map(|w| 0.5 * (integrand(w[0]) + integrand(w[1])))
                        .sum::<f64>();
                return Ok(FloquetEstimate {
                    multiplier: log_mu.exp(),
                    log_multiplier: log_mu,
                    periods_integrated: period + 1,
                    transient_periods,
                });
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Err(GeometryError::NotConverged {
        periods: max_periods,
        tol,
        residual,
    })
}

/// Index `m` of the forcing extremum `mπ/ω` nearest to `t`; an exact tie
/// goes to the earlier extremum.
pub fn nearest_extremum_index(t: f64, omega: f64) -> i64 {
    let u = omega * t / PI;
    let lo = u.floor();
    if u - lo <= 0.5 {
        lo as i64
    } else {
        lo as i64 + 1
    }
}

/// Time in `(t_star − π/ω, t_star)` at which `d_a·cos(ωt)` equals
/// `η·2/3`, found by bisection.
pub fn fold_time(t_star: f64, eta: f64, d_a: f64, omega: f64) -> Result<f64, GeometryError> {
    if d_a <= FOLD_FORCING {
        return Err(GeometryError::NoFold { d_a });
    }
    let g = |t: f64| eta * (d_a * (omega * t).cos() - eta * FOLD_FORCING);
    let (mut lo, mut hi) = (t_star - PI / omega, t_star);
    // g(lo) < 0 < g(hi) on this half-cycle
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Split of a jump phase into the static fold offset and the dynamic delay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpDecomposition {
    pub t_jump: f64,
    pub t_star: f64,
    pub t_fold: f64,
    /// +1 for a forcing maximum, −1 for a minimum.
    pub eta: f64,
    /// `ω(t_jump − t_star)`
    pub psi: f64,
    /// `ω(t_fold − t_star)`
    pub theta: f64,
    /// `ω(t_jump − t_fold)`
    pub phi: f64,
}

pub fn decompose_jump(t_jump: f64, d_a: f64, omega: f64) -> Result<JumpDecomposition, GeometryError> {
    let m = nearest_extremum_index(t_jump, omega);
    let t_star = m as f64 * PI / omega;
    let eta = if m.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
    let t_fold = fold_time(t_star, eta, d_a, omega)?;
    Ok(JumpDecomposition {
        t_jump,
        t_star,
        t_fold,
        eta,
        psi: omega * (t_jump - t_star),
        theta: omega * (t_fold - t_star),
        phi: omega * (t_jump - t_fold),
    })
}

/// One row of the geometry diagnostics export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub d_a: f64,
    pub omega: f64,
    pub fold_exists: bool,
    pub static_phase_offset: Option<f64>,
    pub beta: Option<f64>,
    pub log_floquet: Option<f64>,
}

impl GeometryReport {
    /// Evaluates the closed forms and, when a jumping orbit exists, the
    /// Floquet multiplier of `base` with amplitude `d_a` and rate `omega`.
    pub fn evaluate(base: &SimConfig, d_a: f64, omega: f64, transient: usize, tol: f64) -> Self {
        let info = fold_info(d_a);
        let beta = fold_sweep_rate(d_a, omega).ok();
        let log_floquet = if d_a > FOLD_FORCING {
            let cfg = SimConfig {
                omega,
                sigma: 0.0,
                amplitude_schedule: AmplitudeSchedule::Constant { d_a },
                ..base.clone()
            };
            floquet_multiplier(&cfg, transient, tol).ok().map(|f| f.log_multiplier)
        } else {
            None
        };
        Self {
            d_a,
            omega,
            fold_exists: info.exists,
            static_phase_offset: info.static_phase_offset,
            beta,
            log_floquet,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<(), IoError> {
        io::write_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, TAU};

    fn bisect_cubic(c: f64, mut lo: f64, mut hi: f64) -> f64 {
        let f = |x: f64| x - x * x * x / 3.0 + c;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(lo).signum() == f(mid).signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn roots_at_quarter_phase() {
        for d_a in [0.0, 0.5, 1.2, 3.0] {
            let r = critical_manifold_roots(FRAC_PI_2, d_a);
            assert_eq!(r.len(), 3);
            let s3 = 3f64.sqrt();
            assert!((r[0] + s3).abs() < 1e-12);
            assert!(r[1].abs() < 1e-12);
            assert!((r[2] - s3).abs() < 1e-12);
        }
    }

    #[test]
    fn double_root_at_fold() {
        let r = critical_manifold_roots(0.0, 2.0 / 3.0);
        assert_eq!(r.len(), 2);
        assert!((r[0] + 1.0).abs() < 1e-6, "{r:?}");
        assert!((r[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_root_matches_bisection() {
        let r = critical_manifold_roots(0.0, 1.2);
        assert_eq!(r.len(), 1);
        // f(x) = x − x³/3 + 1.2 changes sign on [1, 4]
        let oracle = bisect_cubic(1.2, 1.0, 4.0);
        assert!((r[0] - oracle).abs() < 1e-12);
        assert!(cubic(r[0], 1.2).abs() < 1e-10);
    }

    #[test]
    fn roots_have_small_residual_everywhere() {
        for i in 0..200 {
            let s = i as f64 * TAU / 200.0;
            for d_a in [0.3, 0.66, 0.7, 1.0, 1.2] {
                let c = d_a * s.cos();
                let roots = critical_manifold_roots(s, d_a);
                assert!((1..=3).contains(&roots.len()));
                for w in roots.windows(2) {
                    assert!(w[0] < w[1]);
                }
                for r in roots {
                    assert!(cubic(r, c).abs() < 1e-10, "s={s} d_a={d_a} r={r}");
                }
            }
        }
    }

    #[test]
    fn root_count_tracks_fold() {
        let count3 = |d_a: f64| {
            (0..400)
                .filter(|i| critical_manifold_roots(*i as f64 * TAU / 400.0, d_a).len() == 3)
                .count()
        };
        assert!(count3(1.2) < 400 && count3(1.2) > 0);
        // below the fold every phase has three roots since |d_a cos s| < 2/3
        assert_eq!(count3(0.5), 400);
        // above the fold the extremal phases have a single root
        assert_eq!(critical_manifold_roots(0.0, 1.0).len(), 1);
        assert_eq!(critical_manifold_roots(PI, 1.0).len(), 1);
    }

    #[test]
    fn fold_info_examples() {
        let f = fold_info(2.0 / 3.0);
        assert!(f.exists);
        assert!(f.static_phase_offset.unwrap().abs() < 1e-7);
        assert!(!fold_info(0.5).exists);
        assert_eq!(fold_info(0.5).static_phase_offset, None);
        let far = fold_info(1e9).static_phase_offset.unwrap();
        assert!((far + FRAC_PI_2).abs() < 1e-8);
        let one = fold_info(1.0).static_phase_offset.unwrap();
        assert!((one - (-(2.0f64 / 3.0).acos())).abs() < 1e-15);
        assert!((one + 0.84107).abs() < 1e-5);
    }

    #[test]
    fn offset_rises_to_zero_as_amplitude_falls() {
        let mut prev = f64::NEG_INFINITY;
        for i in 0..100 {
            let d_a = 2.0 - i as f64 * (2.0 - 0.667) / 99.0;
            let off = static_phase_offset(d_a).unwrap();
            assert!(off > prev);
            assert!(off <= 0.0 && off > -FRAC_PI_2);
            prev = off;
        }
    }

    #[test]
    fn sweep_rate_examples() {
        assert_eq!(fold_sweep_rate(2.0 / 3.0, 1.0).unwrap(), 0.0);
        let b = fold_sweep_rate(1.0, TAU / 225.0).unwrap();
        assert!((b - 0.020814).abs() < 1e-6, "{b}");
        assert!(fold_sweep_rate(1.2, 0.1).unwrap() > fold_sweep_rate(0.8, 0.1).unwrap());
        assert!(fold_sweep_rate(0.6, 0.1).is_err());
    }

    #[test]
    fn delay_phase_scaling() {
        let a = predicted_delay_phase(1.0, 0.02, 1.0).unwrap();
        let b = predicted_delay_phase(1.0, 0.01, 1.0).unwrap();
        assert!((b / a - 2f64.powf(-2.0 / 3.0)).abs() < 1e-12);
        let near = predicted_delay_phase(2.0 / 3.0 + 1e-9, 0.02, 1.0).unwrap();
        assert!(near > 10.0 * a);
        assert!(predicted_delay_phase(2.0 / 3.0, 0.02, 1.0).is_err());
        assert!(predicted_delay_phase(1.0, 0.02, 0.0).is_err());
    }

    #[test]
    fn hazard_window_scaling() {
        assert_eq!(hazard_window_width(0.0, 0.1).unwrap(), 0.0);
        let a = hazard_window_width(0.1, 0.05).unwrap();
        let b = hazard_window_width(0.2, 0.05).unwrap();
        assert!((b / a - 2f64.powf(4.0 / 3.0)).abs() < 1e-12);
        assert!(hazard_window_width(0.1, 0.0).is_err());
    }

    fn floquet_cfg(t_f: f64, d_a: f64) -> SimConfig {
        SimConfig {
            dt: 0.01,
            t_total: t_f,
            omega: TAU / t_f,
            amplitude_schedule: AmplitudeSchedule::Constant { d_a },
            sigma: 0.0,
            x0: 1.0,
            master_seed: 0,
        }
    }

    #[test]
    fn floquet_strongly_contracting_at_slow_forcing() {
        let est = floquet_multiplier(&floquet_cfg(225.0, 1.2), 2, 1e-8).unwrap();
        assert!(est.log_multiplier < -20.0, "{est:?}");
        assert!(est.multiplier >= 0.0 && est.multiplier < 1e-8);
    }

    #[test]
    fn floquet_preconditions() {
        let mut c = floquet_cfg(50.0, 0.5);
        assert!(matches!(
            floquet_multiplier(&c, 2, 1e-8),
            Err(GeometryError::NoFold { .. })
        ));
        c.amplitude_schedule = AmplitudeSchedule::Constant { d_a: 1.2 };
        c.sigma = 0.1;
        assert!(floquet_multiplier(&c, 2, 1e-8).is_err());
        c.sigma = 0.0;
        assert!(matches!(
            floquet_multiplier_with_budget(&c, 0, 0.0, 3),
            Err(GeometryError::NotConverged { .. })
        ));
    }

    #[test]
    fn floquet_decreases_with_slower_forcing() {
        let logs: Vec<f64> = [25.0, 50.0, 100.0, 200.0]
            .iter()
            .map(|t| {
                floquet_multiplier(&floquet_cfg(*t, 1.2), 3, 1e-8)
                    .unwrap()
                    .log_multiplier
            })
            .collect();
        for w in logs.windows(2) {
            assert!(w[1] < w[0], "{logs:?}");
        }
    }

    #[test]
    fn extremum_index_and_tie() {
        let omega = 0.5;
        assert_eq!(nearest_extremum_index(0.0, omega), 0);
        assert_eq!(nearest_extremum_index(PI / omega * 0.9, omega), 1);
        // exact tie at a quarter period goes to the earlier extremum
        assert_eq!(nearest_extremum_index(PI / omega * 0.5, omega), 0);
        assert_eq!(nearest_extremum_index(-PI / omega * 0.2, omega), 0);
    }

    #[test]
    fn fold_time_matches_closed_form() {
        let omega = TAU / 225.0;
        for d_a in [0.7, 1.0, 1.2] {
            for m in [3i64, 4, 10] {
                let t_star = m as f64 * PI / omega;
                let eta = if m % 2 == 0 { 1.0 } else { -1.0 };
                let tf = fold_time(t_star, eta, d_a, omega).unwrap();
                assert!((d_a * (omega * tf).cos() - eta * 2.0 / 3.0).abs() < 1e-12);
                let theta = omega * (tf - t_star);
                assert!((theta - static_phase_offset(d_a).unwrap()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn decomposition_identity() {
        let omega = TAU / 225.0;
        for t in [80.0, 95.5, 200.0, 310.25] {
            let d = decompose_jump(t, 1.1, omega).unwrap();
            assert!((d.psi - (d.theta + d.phi)).abs() < 1e-12);
            assert!(d.psi.abs() <= FRAC_PI_2 + 1e-12);
        }
    }

    #[test]
    fn report_row_below_fold() {
        let r = GeometryReport::evaluate(&floquet_cfg(100.0, 1.0), 0.5, 0.1, 2, 1e-8);
        assert!(!r.fold_exists);
        assert_eq!(r.beta, None);
        assert_eq!(r.log_floquet, None);
        let js = serde_json::to_value(&r).unwrap();
        for k in [
            "d_a",
            "omega",
            "fold_exists",
            "static_phase_offset",
            "beta",
            "log_floquet",
        ] {
            assert!(js.get(k).is_some(), "{k}");
        }
    }
}
