//! Allocation rules mapping the planner's observation to a control `u`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;

use crate::coalition::ControlVector;
use crate::error::{check_len, Error, Result};
use crate::exact::Expansion;
use crate::linalg::{row_abs_sum_max, saturate, sign_vector};
use crate::sim::FlowSystem;

/// Largest `m` for which the partial-information audit enumerates every
/// sign vector.
pub const EXHAUSTIVE_AUDIT_MAX_ROWS: usize = 15;

/// What a controller may look at during one step.
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    pub x: &'a DVector<f64>,
    pub x0: &'a DVector<f64>,
    pub z: &'a DVector<f64>,
    /// Sign of `x` as reported by the excess/surplus oracle.
    pub sgn_x: &'a DVector<f64>,
}

/// A control together with whether it had to be projected into `U`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub u: ControlVector,
    pub clamped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ControllerKind {
    Full,
    Partial,
    DiscreteApproach,
    Stationary,
}

impl ControllerKind {
    pub fn label(self) -> &'static str {
        match self {
            ControllerKind::Full => "full",
            ControllerKind::Partial => "partial",
            ControllerKind::DiscreteApproach => "discrete-approach",
            ControllerKind::Stationary => "stationary",
        }
    }

    pub fn is_discrete(self) -> bool {
        self == ControllerKind::DiscreteApproach
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(ControllerKind::Full),
            "partial" => Ok(ControllerKind::Partial),
            "discrete-approach" => Ok(ControllerKind::DiscreteApproach),
            "stationary" => Ok(ControllerKind::Stationary),
            other => Err(format!(
                "unknown controller `{other}` (expected full, partial, discrete-approach or stationary)"
            )),
        }
    }
}

pub trait AllocationRule: Send + Sync {
    fn decide(&self, obs: &Observation<'_>) -> Decision;

    fn kind(&self) -> ControllerKind;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ThresholdMode {
    /// One pair `(max du_min, min du_max)` shared by every component.
    Scalar,
    #[default]
    Componentwise,
}

impl FromStr for ThresholdMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "scalar" => Ok(ThresholdMode::Scalar),
            "componentwise" => Ok(ThresholdMode::Componentwise),
            other => Err(format!(
                "unknown threshold mode `{other}` (expected scalar or componentwise)"
            )),
        }
    }
}

/// `u = u_nom + sat(-z, du_min, du_max)`.
#[derive(Clone, Debug)]
pub struct FullInfoController {
    u_nom: ControlVector,
    du_min: DVector<f64>,
    du_max: DVector<f64>,
}

impl FullInfoController {
    pub fn new(sys: &FlowSystem, mode: ThresholdMode) -> Result<Self> {
        let residual = sys.nominal_residual();
        if residual > crate::sim::NOMINAL_TOL {
            return Err(Error::Construction(format!(
                "B u_nom differs from v_nom by {residual:e}"
            )));
        }
        let u_nom = sys.u_nom().values();
        let mut du_min = sys.feasible().lower() - u_nom;
        let mut du_max = sys.feasible().upper() - u_nom;
        if mode == ThresholdMode::Scalar {
            let lo = du_min.max();
            let hi = du_max.min();
            du_min.fill(lo);
            du_max.fill(hi);
        }
        Ok(FullInfoController {
            u_nom: sys.u_nom().clone(),
            du_min,
            du_max,
        })
    }

    pub fn thresholds(&self) -> (&DVector<f64>, &DVector<f64>) {
        (&self.du_min, &self.du_max)
    }

    pub fn control(&self, z: &DVector<f64>) -> ControlVector {
        let du = saturate(&(-z), &self.du_min, &self.du_max).expect("thresholds are ordered");
        let values = self.u_nom.values() + du;
        ControlVector::new(self.u_nom.players(), values).expect("dimension fixed at construction")
    }
}

impl AllocationRule for FullInfoController {
    fn decide(&self, obs: &Observation<'_>) -> Decision {
        Decision {
            u: self.control(obs.z),
            clamped: false,
        }
    }

    fn kind(&self) -> ControllerKind {
        ControllerKind::Full
    }
}

/// Outcome of checking `u_nom - delta B† sigma` against `U`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartialAudit {
    /// `max_i sum_j |B†_ij|`.
    pub row_sum_bound: f64,
    /// `u_nom ± delta * row_sum_bound` stays inside `U`.
    pub conservative_ok: bool,
    /// Every `sigma` in `{-1, 1}^m` keeps the control inside `U`; `None`
    /// when `m` is too large to enumerate.
    pub exhaustive_ok: Option<bool>,
}

impl PartialAudit {
    /// Raised when either check fails; the controller then clamps.
    pub fn flag(&self) -> bool {
        !self.conservative_ok || self.exhaustive_ok == Some(false)
    }
}

/// `u = clamp_U(u_nom - delta B† sgn(x))`.
#[derive(Clone, Debug)]
pub struct PartialInfoController {
    sys: FlowSystem,
    delta: f64,
    audit: PartialAudit,
}

impl PartialInfoController {
    pub fn new(sys: &FlowSystem, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::Domain(format!("delta must be positive, got {delta}")));
        }
        let audit = audit_partial(sys, delta);
        Ok(PartialInfoController {
            sys: sys.clone(),
            delta,
            audit,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn audit(&self) -> PartialAudit {
        self.audit
    }

    pub fn control(&self, sgn_x: &DVector<f64>) -> Decision {
        let raw = self.sys.u_nom().values() - &self.sys.matrices().b_dagger * sgn_x * self.delta;
        let u = self.sys.feasible().clamp(&raw);
        let clamped = u.values() != &raw;
        Decision { u, clamped }
    }
}

impl AllocationRule for PartialInfoController {
    fn decide(&self, obs: &Observation<'_>) -> Decision {
        self.control(obs.sgn_x)
    }

    fn kind(&self) -> ControllerKind {
        ControllerKind::Partial
    }
}

fn audit_partial(sys: &FlowSystem, delta: f64) -> PartialAudit {
    let dagger = &sys.matrices().b_dagger;
    let u_nom = sys.u_nom().values();
    let lo = sys.feasible().lower();
    let hi = sys.feasible().upper();
    let rho = row_abs_sum_max(dagger);
    let conservative_ok =
        (0..u_nom.len()).all(|i| u_nom[i] - delta * rho >= lo[i] && u_nom[i] + delta * rho <= hi[i]);

    let m = dagger.ncols();
    let exhaustive_ok = (m <= EXHAUSTIVE_AUDIT_MAX_ROWS).then(|| {
        let mut sigma = DVector::zeros(m);
        (0u32..1 << m).all(|bits| {
            for j in 0..m {
                sigma[j] = if bits >> j & 1 == 1 { 1.0 } else { -1.0 };
            }
            let u = u_nom - dagger * &sigma * delta;
            (0..u.len()).all(|i| u[i] >= lo[i] && u[i] <= hi[i])
        })
    });
    PartialAudit {
        row_sum_bound: rho,
        conservative_ok,
        exhaustive_ok,
    }
}

/// Discrete-time rule `u_k = clamp_U(u_nom - delta B† sgn(x_k - x_0))`.
#[derive(Clone, Debug)]
pub struct DiscreteApproachController(pub PartialInfoController);

impl DiscreteApproachController {
    pub fn new(sys: &FlowSystem, delta: f64) -> Result<Self> {
        PartialInfoController::new(sys, delta).map(DiscreteApproachController)
    }

    pub fn control(&self, x_k: &DVector<f64>, x_0: &DVector<f64>) -> Decision {
        self.0.control(&sign_vector(&(x_k - x_0)))
    }
}

impl AllocationRule for DiscreteApproachController {
    fn decide(&self, obs: &Observation<'_>) -> Decision {
        self.control(obs.x, obs.x0)
    }

    fn kind(&self) -> ControllerKind {
        ControllerKind::DiscreteApproach
    }
}

/// Always plays `u_nom`.
#[derive(Clone, Debug)]
pub struct StationaryController(pub ControlVector);

impl AllocationRule for StationaryController {
    fn decide(&self, _obs: &Observation<'_>) -> Decision {
        Decision {
            u: self.0.clone(),
            clamped: false,
        }
    }

    fn kind(&self) -> ControllerKind {
        ControllerKind::Stationary
    }
}

/// `x = (eps - [s_tilde; 0]) - (eps0 - x0)` evaluated without rounding.
/// The grand coalition has no surplus variable.
pub fn oracle_exact(
    eps: &[Expansion],
    s_tilde: &[Expansion],
    eps0: &DVector<f64>,
    x0: &DVector<f64>,
) -> Result<Vec<Expansion>> {
    let m = eps.len();
    if m == 0 {
        return Err(Error::Domain("empty excess vector".into()));
    }
    check_len("accumulated surplus", s_tilde.len(), m - 1)?;
    check_len("initial excess", eps0.len(), m)?;
    check_len("initial state", x0.len(), m)?;
    Ok((0..m)
        .map(|j| {
            let mut x = eps[j].clone();
            if j + 1 < m {
                x.sub_expansion(&s_tilde[j]);
            }
            x.add(-eps0[j]);
            x.add(x0[j]);
            x
        })
        .collect())
}

fn lift(v: &DVector<f64>) -> Vec<Expansion> {
    v.iter().map(|&x| Expansion::new(x)).collect()
}

/// The state the oracle's comparisons describe, rounded to floats.
pub fn oracle_state(
    eps: &DVector<f64>,
    s_tilde: &DVector<f64>,
    eps0: &DVector<f64>,
    x0: &DVector<f64>,
) -> Result<DVector<f64>> {
    let x = oracle_exact(&lift(eps), &lift(s_tilde), eps0, x0)?;
    Ok(DVector::from_iterator(x.len(), x.iter().map(Expansion::value)))
}

/// Ternary answer of the oracle: `1` where the coalition's excess beats
/// its accumulated surplus, `-1` where it falls short, `0` on a tie.
pub fn oracle_sign(
    eps: &DVector<f64>,
    s_tilde: &DVector<f64>,
    eps0: &DVector<f64>,
    x0: &DVector<f64>,
) -> Result<DVector<f64>> {
    let x = oracle_exact(&lift(eps), &lift(s_tilde), eps0, x0)?;
    Ok(DVector::from_iterator(x.len(), x.iter().map(Expansion::signum)))
}
