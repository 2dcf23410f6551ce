//! Convergence checks on finished trajectories.

use nalgebra::DVector;

use crate::coalition::{core_violation, GameVector};
use crate::error::{Error, Result};
use crate::sim::{FlowSystem, TrajectoryRecord};

/// Fraction of the series used for the first and last windows.
pub const DEFAULT_WINDOW: f64 = 0.1;

pub fn lyapunov(x: &DVector<f64>) -> f64 {
    0.5 * x.norm_squared()
}

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStat {
    pub mean: f64,
    /// Zero when fewer than two samples.
    pub se: f64,
    pub count: usize,
}

impl MeanStat {
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::Domain("no samples to average".into()));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let se = if xs.len() < 2 {
            0.0
        } else {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Ok(MeanStat {
            mean,
            se,
            count: xs.len(),
        })
    }

    /// `mean + k * se`.
    pub fn upper(&self, k: f64) -> f64 {
        self.mean + k * self.se
    }

    /// `mean - k * se`.
    pub fn lower(&self, k: f64) -> f64 {
        self.mean - k * self.se
    }
}

/// Window means and trailing slope of a Lyapunov series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LyapunovTrend {
    pub first_mean: f64,
    pub last_mean: f64,
    /// `last_mean / first_mean`; zero when both are zero.
    pub ratio: f64,
    /// Least-squares slope per step over the last window.
    pub trailing_slope: f64,
}

pub fn lyapunov_trend(series: &[f64], burn_in: usize, window: f64) -> Result<LyapunovTrend> {
    if !(window > 0.0 && window <= 0.5) {
        return Err(Error::Domain(format!("window fraction {window} not in (0, 0.5]")));
    }
    let body = series
        .get(burn_in..)
        .filter(|b| !b.is_empty())
        .ok_or_else(|| Error::Domain("series is shorter than the burn-in".into()))?;
    let w = ((body.len() as f64 * window).floor() as usize).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let first_mean = mean(&body[..w]);
    let tail = &body[body.len() - w..];
    let last_mean = mean(tail);
    let ratio = if first_mean > 0.0 {
        last_mean / first_mean
    } else if last_mean == 0.0 {
        0.0
    } else {
        f64::MAX
    };
    Ok(LyapunovTrend {
        first_mean,
        last_mean,
        ratio,
        trailing_slope: slope(tail),
    })
}

fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let tbar = (n - 1.0) / 2.0;
    let ybar = ys.iter().sum::<f64>() / n;
    let (num, den) = ys.iter().enumerate().fold((0.0, 0.0), |(num, den), (i, &y)| {
        let dt = i as f64 - tbar;
        (num + dt * (y - ybar), den + dt * dt)
    });
    num / den
}

/// Mean of `ybar_k' y_{k+1}` per record, then mean and standard error
/// across records. Records without any term are skipped.
pub fn approachability_stat(records: &[TrajectoryRecord]) -> Result<MeanStat> {
    if records.is_empty() {
        return Err(Error::Domain("no records".into()));
    }
    let means: Vec<f64> = records.iter().filter_map(|r| r.approach.mean()).collect();
    if means.is_empty() {
        return Ok(MeanStat {
            mean: 0.0,
            se: 0.0,
            count: 0,
        });
    }
    MeanStat::from_samples(&means)
}

/// The same statistic recomputed from a stored path
/// `x_0, ..., x_K`: mean over `k = 1..K-1` of `(x_k - x_0)' (x_{k+1} - x_k) / k`.
pub fn approach_from_path(path: &[DVector<f64>]) -> Option<f64> {
    if path.len() < 3 {
        return None;
    }
    let x0 = &path[0];
    let terms = (1..path.len() - 1).map(|k| (&path[k] - x0).dot(&(&path[k + 1] - &path[k])) / k as f64);
    Some(terms.sum::<f64>() / (path.len() - 2) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttainStat {
    /// Mean of `x' x_dot` over steps off the zero band; zero if none.
    pub off_mean: f64,
    pub off_count: usize,
    /// Infinity norm of the mean `x_dot` over steps on the band; zero if none.
    pub band_drift: f64,
    pub band_count: usize,
}

pub fn attainability_stat(record: &TrajectoryRecord) -> AttainStat {
    let a = &record.attain;
    AttainStat {
        off_mean: if a.off_count > 0 {
            a.off_sum / a.off_count as f64
        } else {
            0.0
        },
        off_count: a.off_count,
        band_drift: if a.band_count > 0 {
            (&a.band_drift_sum / a.band_count as f64).amax()
        } else {
            0.0
        },
        band_count: a.band_count,
    }
}

/// Per-record off-band means, combined across records.
pub fn attainability_confidence(records: &[TrajectoryRecord]) -> Result<MeanStat> {
    let means: Vec<f64> = records
        .iter()
        .map(attainability_stat)
        .filter(|s| s.off_count > 0)
        .map(|s| s.off_mean)
        .collect();
    MeanStat::from_samples(&means)
}

/// Where the normalized excess ends up relative to the target set
/// `{tau : tau_m = 0, tau_j >= 0}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetReport {
    /// `(eps(T) - eps(0)) / T`.
    pub tau: DVector<f64>,
    /// `max(0, -min_j tau_j)` over proper coalitions.
    pub tau_negative: f64,
    /// `|tau_m|`.
    pub tau_grand: f64,
    /// `|eps(T)/T - [s_nom; 0]|_inf`.
    pub direction_error: f64,
    /// Infinity norm of the negative part of `eps(T)`.
    pub excess_cone_violation: f64,
}

pub fn target_membership(record: &TrajectoryRecord, s_nom: &DVector<f64>) -> Result<TargetReport> {
    target_from_parts(&record.eps0, &record.eps_final, record.horizon(), s_nom)
}

pub fn target_from_parts(
    eps0: &DVector<f64>,
    eps_final: &DVector<f64>,
    horizon: f64,
    s_nom: &DVector<f64>,
) -> Result<TargetReport> {
    if !(horizon > 0.0) {
        return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
    }
    let m = eps_final.len();
    crate::error::check_len("nominal surplus", s_nom.len(), m - 1)?;
    let tau = (eps_final - eps0) / horizon;
    let tau_negative = (0..m - 1).map(|j| -tau[j]).fold(0.0, f64::max);
    let direction_error = (0..m)
        .map(|j| {
            let target = if j + 1 < m { s_nom[j] } else { 0.0 };
            (eps_final[j] / horizon - target).abs()
        })
        .fold(0.0, f64::max);
    let excess_cone_violation = eps_final.iter().map(|&e| -e).fold(0.0, f64::max);
    Ok(TargetReport {
        tau_grand: tau[m - 1].abs(),
        tau,
        tau_negative,
        direction_error,
        excess_cone_violation,
    })
}

/// Summary of one record, or of several records averaged componentwise.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticReport {
    pub lyapunov: LyapunovTrend,
    pub approach_stat: f64,
    pub attain_stat: f64,
    pub attain_band_drift: f64,
    /// `|(x(T) - x(0)) / T|_inf`.
    pub ratio_norm: f64,
    /// Core residual of `abar(T)` against `v_nom`.
    pub core_violation_of_mean: f64,
    pub excess_cone_violation: f64,
    pub direction_error: f64,
    /// `|abar(T) - a_nom|_inf`.
    pub avg_alloc_error: f64,
    pub tau_negative: f64,
    pub tau_grand: f64,
    pub abar: DVector<f64>,
    pub oracle_mismatches: usize,
    pub clamped_steps: usize,
}

impl DiagnosticReport {
    /// Averages `abar`, `eps(T)`, `x(T)` and the Lyapunov series over the
    /// records first, then takes norms. The Lyapunov series is `V(z)` for
    /// the full-information rule and `V(x)` otherwise.
    pub fn from_records(
        records: &[TrajectoryRecord],
        sys: &FlowSystem,
        burn_in: usize,
    ) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::Domain("no records".into()))?;
        if records
            .iter()
            .any(|r| r.steps != first.steps || r.dt != first.dt || r.kind != first.kind)
        {
            return Err(Error::Domain("records differ in horizon or controller".into()));
        }
        let k = records.len() as f64;
        let avg = |f: &dyn Fn(&TrajectoryRecord) -> DVector<f64>| {
            records.iter().map(f).fold(DVector::zeros(f(first).len()), |acc, v| acc + v) / k
        };
        let abar = avg(&|r| r.abar());
        let ratio = avg(&|r| r.final_ratio());
        let eps0 = avg(&|r| r.eps0.clone());
        let eps_final = avg(&|r| r.eps_final.clone());

        let use_z = first.kind == crate::control::ControllerKind::Full;
        let mut series = vec![0.0; first.steps];
        for r in records {
            let s = if use_z { &r.lyapunov_z } else { &r.lyapunov_x };
            for (acc, v) in series.iter_mut().zip(s) {
                *acc += v / k;
            }
        }
        let lyapunov = lyapunov_trend(&series, burn_in, DEFAULT_WINDOW)?;
        let target = target_from_parts(&eps0, &eps_final, first.horizon(), &sys.s_nom())?;
        let approach = approachability_stat(records)?;
        let attain: Vec<AttainStat> = records.iter().map(attainability_stat).collect();
        let attain_stat = attain.iter().map(|a| a.off_mean).sum::<f64>() / k;
        let attain_band_drift = attain.iter().map(|a| a.band_drift).sum::<f64>() / k;
        let a_nom = sys.u_nom().allocation();
        let v_nom: &GameVector = sys.v_nom();

        let report = DiagnosticReport {
            lyapunov,
            approach_stat: approach.mean,
            attain_stat,
            attain_band_drift,
            ratio_norm: ratio.amax(),
            core_violation_of_mean: core_violation(sys.index(), v_nom, &abar),
            excess_cone_violation: target.excess_cone_violation,
            direction_error: target.direction_error,
            avg_alloc_error: (&abar - a_nom).amax(),
            tau_negative: target.tau_negative,
            tau_grand: target.tau_grand,
            abar,
            oracle_mismatches: records.iter().map(|r| r.oracle_mismatches).sum(),
            clamped_steps: records.iter().map(|r| r.clamped_steps).sum(),
        };
        if !report.is_finite() {
            return Err(Error::Numeric("diagnostic report has non-finite fields".into()));
        }
        Ok(report)
    }

    pub fn is_finite(&self) -> bool {
        [
            self.lyapunov.first_mean,
            self.lyapunov.last_mean,
            self.lyapunov.ratio,
            self.lyapunov.trailing_slope,
            self.approach_stat,
            self.attain_stat,
            self.attain_band_drift,
            self.ratio_norm,
            self.core_violation_of_mean,
            self.excess_cone_violation,
            self.direction_error,
            self.avg_alloc_error,
            self.tau_negative,
            self.tau_grand,
        ]
        .iter()
        .chain(self.abar.iter())
        .all(|v| v.is_finite())
    }
}
