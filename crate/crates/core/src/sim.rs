//! Explicit-Euler integration of `x' = B u - v`, the augmented state `y`,
//! and the discrete recursion `x_{k+1} = x_k + B du_k - dv_k`.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coalition::{augmented_matrix, CoalitionIndex, ControlVector, FeasibleSet, GameVector};
use crate::control::{oracle_exact, AllocationRule, ControllerKind, Observation};
use crate::error::{check_finite, check_len, Error, Result};
use crate::exact::Expansion;
use crate::linalg::{sign_vector, SystemMatrices};
use crate::source::GameSource;

/// Tolerance for `B u_nom = v_nom`.
pub const NOMINAL_TOL: f64 = 1e-9;

/// Tolerance of the feasibility guard in the step functions.
pub const FEASIBILITY_TOL: f64 = 1e-9;

pub const DEFAULT_STRIDE: usize = 100;

/// Everything fixed for the lifetime of a simulation: coalition layout,
/// matrices, nominal game and control, and the feasible set.
#[derive(Clone, Debug)]
pub struct FlowSystem {
    index: CoalitionIndex,
    incidence: DMatrix<f64>,
    matrices: SystemMatrices,
    v_nom: GameVector,
    u_nom: ControlVector,
    feasible: FeasibleSet,
}

impl FlowSystem {
    pub fn new(
        index: CoalitionIndex,
        v_nom: GameVector,
        u_nom: ControlVector,
        feasible: FeasibleSet,
    ) -> Result<Self> {
        index.check_game(&v_nom)?;
        check_len("nominal control", u_nom.len(), index.control_dim())?;
        check_len("nominal control players", u_nom.players(), index.players())?;
        let incidence = index.incidence_matrix();
        let matrices = SystemMatrices::new(augmented_matrix(&incidence))?;
        if !feasible.contains(&u_nom, 0.0) {
            return Err(Error::Construction(format!(
                "u_nom lies outside U by {:e}",
                feasible.violation(&u_nom)
            )));
        }
        let sys = FlowSystem {
            index,
            incidence,
            matrices,
            v_nom,
            u_nom,
            feasible,
        };
        let residual = sys.nominal_residual();
        if residual > NOMINAL_TOL {
            return Err(Error::Construction(format!(
                "B u_nom differs from v_nom by {residual:e}"
            )));
        }
        Ok(sys)
    }

    pub fn index(&self) -> &CoalitionIndex {
        &self.index
    }

    pub fn incidence(&self) -> &DMatrix<f64> {
        &self.incidence
    }

    pub fn matrices(&self) -> &SystemMatrices {
        &self.matrices
    }

    pub fn v_nom(&self) -> &GameVector {
        &self.v_nom
    }

    pub fn u_nom(&self) -> &ControlVector {
        &self.u_nom
    }

    pub fn feasible(&self) -> &FeasibleSet {
        &self.feasible
    }

    pub fn m(&self) -> usize {
        self.index.len()
    }

    /// `s_nom = B_H a_nom - v_nom` on the proper coalitions.
    pub fn s_nom(&self) -> DVector<f64> {
        self.u_nom.surplus()
    }

    /// Max-abs entry of `B u_nom - v_nom`.
    pub fn nominal_residual(&self) -> f64 {
        (&self.matrices.b * self.u_nom.values() - self.v_nom.values()).amax()
    }

    /// Dimension and feasibility checks applied before every step.
    pub fn check_step(&self, u: &ControlVector, v: &GameVector) -> Result<()> {
        check_len("control", u.len(), self.index.control_dim())?;
        self.index.check_game(v)?;
        let violation = self.feasible.violation(u);
        if violation > FEASIBILITY_TOL {
            return Err(Error::Infeasible(format!(
                "control leaves U by {violation:e}"
            )));
        }
        Ok(())
    }

    /// One Euler step: `x += dt (B u - v)`, `y += dt C (u - u_nom)`.
    pub fn step_continuous(
        &self,
        state: &FlowState,
        u: &ControlVector,
        v: &GameVector,
        dt: f64,
    ) -> Result<FlowState> {
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("dt must be positive, got {dt}")));
        }
        self.check_step(u, v)?;
        let x = &state.x + (&self.matrices.b * u.values() - v.values()) * dt;
        let du = u.values() - self.u_nom.values();
        let y = &state.y + (&self.matrices.c * du) * dt;
        Ok(FlowState {
            x,
            y,
            t: state.t + dt,
            x0: state.x0.clone(),
        })
    }

    /// `x_{k+1} = x_k + B du_k - dv_k`; also returns `y_{k+1} = x_{k+1} - x_k`.
    pub fn step_discrete(
        &self,
        x_k: &DVector<f64>,
        u: &ControlVector,
        v: &GameVector,
    ) -> Result<DiscreteStep> {
        check_len("discrete state", x_k.len(), self.m())?;
        self.check_step(u, v)?;
        let du = u.values() - self.u_nom.values();
        let dv = v.values() - self.v_nom.values();
        let y_next = &self.matrices.b * du - dv;
        Ok(DiscreteStep {
            x_next: x_k + &y_next,
            y_next,
        })
    }
}

/// Continuous-time state.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub t: f64,
    pub x0: DVector<f64>,
}

impl FlowState {
    pub fn new(x0: DVector<f64>, y0: DVector<f64>) -> Self {
        FlowState {
            x: x0.clone(),
            y: y0,
            t: 0.0,
            x0,
        }
    }

    /// `z = B† x + F y`.
    pub fn z(&self, matrices: &SystemMatrices) -> DVector<f64> {
        matrices.z(&self.x, &self.y)
    }

    /// Max-abs residual of `[x; y] = [B; C] z`.
    pub fn round_trip_residual(&self, matrices: &SystemMatrices) -> f64 {
        let z = self.z(matrices);
        let dx = (&matrices.b * &z - &self.x).amax();
        let dy = if self.y.is_empty() {
            0.0
        } else {
            (&matrices.c * &z - &self.y).amax()
        };
        dx.max(dy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteStep {
    pub x_next: DVector<f64>,
    pub y_next: DVector<f64>,
}

/// Run parameters shared by every trial.
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub dt: f64,
    pub steps: usize,
    pub stride: usize,
    pub seed: u64,
    pub trials: usize,
    /// Defaults to zero.
    pub epsilon0: Option<DVector<f64>>,
    /// Defaults to zero.
    pub x0: Option<DVector<f64>>,
    /// Defaults to zero, which makes `z(0) = B† x(0)`.
    pub y0: Option<DVector<f64>>,
    /// `|x|_1` at or below this counts as "at zero" for the attainability
    /// statistic.
    pub zero_band: f64,
    /// Keep every `x_k`, not only the decimated samples.
    pub keep_path: bool,
}

impl SimConfig {
    pub fn new(dt: f64, steps: usize) -> Self {
        SimConfig {
            dt,
            steps,
            stride: DEFAULT_STRIDE,
            seed: 0,
            trials: 1,
            epsilon0: None,
            x0: None,
            y0: None,
            zero_band: 0.0,
            keep_path: false,
        }
    }

    pub fn validate(&self, sys: &FlowSystem) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Domain(format!("dt must be positive, got {}", self.dt)));
        }
        if self.steps == 0 || self.trials == 0 || self.stride == 0 {
            return Err(Error::Domain("steps, trials and stride must be at least 1".into()));
        }
        if !(self.zero_band >= 0.0) {
            return Err(Error::Domain("zero band must be non-negative".into()));
        }
        let m = sys.m();
        for (what, v, len) in [
            ("epsilon0", &self.epsilon0, m),
            ("x0", &self.x0, m),
            ("y0", &self.y0, sys.matrices().c.nrows()),
        ] {
            if let Some(v) = v {
                check_len(what, v.len(), len)?;
                check_finite(what, v.as_slice())?;
            }
        }
        Ok(())
    }
}

/// Deterministic per-trial generator: one ChaCha stream per `stream` id.
pub fn trial_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Compensated running sum of a vector.
#[derive(Clone, Debug)]
struct KahanVec {
    sum: DVector<f64>,
    comp: DVector<f64>,
}

impl KahanVec {
    fn zeros(n: usize) -> Self {
        KahanVec {
            sum: DVector::zeros(n),
            comp: DVector::zeros(n),
        }
    }

    fn add_scaled(&mut self, v: &DVector<f64>, h: f64) {
        for i in 0..v.len() {
            let y = v[i] * h - self.comp[i];
            let t = self.sum[i] + y;
            self.comp[i] = (t - self.sum[i]) - y;
            self.sum[i] = t;
        }
    }
}

/// One decimated row of a trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: DVector<f64>,
    /// `(x - x0) / t`, zero at `t = 0`.
    pub ratio: DVector<f64>,
    pub z: DVector<f64>,
    pub eps: DVector<f64>,
    /// Running averages; zero at `t = 0`.
    pub abar: DVector<f64>,
    pub vbar: DVector<f64>,
    pub ubar: DVector<f64>,
    /// `V(z)` for the full-information rule, `V(x)` otherwise.
    pub lyapunov: f64,
}

/// Sums behind the attainability statistic.
#[derive(Clone, Debug, PartialEq)]
pub struct AttainAccumulator {
    /// Sum of `x' x_dot` over steps with `|x|_1 > band`.
    pub off_sum: f64,
    pub off_count: usize,
    /// Sum of `x_dot` over steps with `|x|_1 <= band`.
    pub band_drift_sum: DVector<f64>,
    pub band_count: usize,
}

/// Sums of `ybar_k' y_{k+1}` for `k >= 1`. Continuous runs use
/// `ybar = (x - x0) / t` and `y = x_dot` instead.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ApproachAccumulator {
    pub sum: f64,
    pub count: usize,
}

impl ApproachAccumulator {
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Output of one trial. Immutable once returned.
#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    pub kind: ControllerKind,
    pub discrete: bool,
    pub dt: f64,
    pub steps: usize,
    pub samples: Vec<Sample>,
    /// `V(z_k)` at every step before the update.
    pub lyapunov_z: Vec<f64>,
    /// `V(x_k)` at every step before the update.
    pub lyapunov_x: Vec<f64>,
    pub x0: DVector<f64>,
    pub x_final: DVector<f64>,
    pub z_final: DVector<f64>,
    pub eps0: DVector<f64>,
    pub eps_final: DVector<f64>,
    /// Integrals of `a`, `s`, `v`, `u` over the run.
    pub a_integral: DVector<f64>,
    pub s_integral: DVector<f64>,
    pub v_integral: DVector<f64>,
    pub u_integral: DVector<f64>,
    pub attain: AttainAccumulator,
    pub approach: ApproachAccumulator,
    /// Steps where the oracle sign differed from `sgn(x)`.
    pub oracle_mismatches: usize,
    /// Largest `|x_oracle - x|` seen.
    pub oracle_gap: f64,
    /// Largest `[x; y] = [B; C] z` residual seen (continuous runs).
    pub max_round_trip: f64,
    pub clamped_steps: usize,
    /// `x_0, ..., x_K` when requested.
    pub path: Option<Vec<DVector<f64>>>,
}

impl TrajectoryRecord {
    /// Final time `T = steps * dt`.
    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn abar(&self) -> DVector<f64> {
        &self.a_integral / self.horizon()
    }

    pub fn sbar(&self) -> DVector<f64> {
        &self.s_integral / self.horizon()
    }

    pub fn vbar(&self) -> DVector<f64> {
        &self.v_integral / self.horizon()
    }

    pub fn ubar(&self) -> DVector<f64> {
        &self.u_integral / self.horizon()
    }

    /// `(x(T) - x(0)) / T`.
    pub fn final_ratio(&self) -> DVector<f64> {
        (&self.x_final - &self.x0) / self.horizon()
    }

    pub fn excess_nonnegative(&self, tol: f64) -> bool {
        self.eps_final.iter().all(|&e| e >= -tol)
    }
}

/// Continuous-time trial with step `cfg.dt`.
pub fn run_trajectory(
    sys: &FlowSystem,
    rule: &dyn AllocationRule,
    source: &dyn GameSource,
    cfg: &SimConfig,
    rng: &mut dyn RngCore,
) -> Result<TrajectoryRecord> {
    run(sys, rule, source, cfg, rng, false)
}

/// Discrete-time trial (unit step) following `x_{k+1} = x_k + B du_k - dv_k`.
///
/// Both run modes accumulate `x`, `eps` and the surplus integral exactly;
/// [`FlowSystem::step_continuous`] and [`FlowSystem::step_discrete`] are
/// the plain floating-point versions of one step.
pub fn run_discrete(
    sys: &FlowSystem,
    rule: &dyn AllocationRule,
    source: &dyn GameSource,
    cfg: &SimConfig,
    rng: &mut dyn RngCore,
) -> Result<TrajectoryRecord> {
    let mut cfg = cfg.clone();
    cfg.dt = 1.0;
    run(sys, rule, source, &cfg, rng, true)
}

fn run(
    sys: &FlowSystem,
    rule: &dyn AllocationRule,
    source: &dyn GameSource,
    cfg: &SimConfig,
    rng: &mut dyn RngCore,
    discrete: bool,
) -> Result<TrajectoryRecord> {
    cfg.validate(sys)?;
    let m = sys.m();
    let n = sys.index().players();
    let dim = sys.index().control_dim();
    let mats = sys.matrices();
    let h = cfg.dt;
    let kind = rule.kind();

    let x0 = cfg.x0.clone().unwrap_or_else(|| DVector::zeros(m));
    let y0 = if discrete {
        DVector::zeros(mats.c.nrows())
    } else {
        cfg.y0.clone().unwrap_or_else(|| DVector::zeros(mats.c.nrows()))
    };
    let eps0 = cfg.epsilon0.clone().unwrap_or_else(|| DVector::zeros(m));
    let mut state = FlowState::new(x0.clone(), y0);
    // x, eps and the surplus integral are summed exactly, so the identity
    // x = (eps - [s_tilde; 0]) - (eps0 - x0) holds without round-off.
    let lift = |v: &DVector<f64>| v.iter().map(|&x| Expansion::new(x)).collect::<Vec<_>>();
    let mut x_ex = lift(&x0);
    let mut eps_ex = lift(&eps0);
    let mut s_ex = vec![Expansion::default(); m - 1];
    let values = |e: &[Expansion]| DVector::from_iterator(e.len(), e.iter().map(Expansion::value));

    let mut a_acc = KahanVec::zeros(n);
    let mut v_acc = KahanVec::zeros(m);
    let mut u_acc = KahanVec::zeros(dim);

    let mut samples = Vec::with_capacity(cfg.steps.div_ceil(cfg.stride));
    let mut lyapunov_z = Vec::with_capacity(cfg.steps);
    let mut lyapunov_x = Vec::with_capacity(cfg.steps);
    let mut attain = AttainAccumulator {
        off_sum: 0.0,
        off_count: 0,
        band_drift_sum: DVector::zeros(m),
        band_count: 0,
    };
    let mut approach = ApproachAccumulator::default();
    let mut oracle_mismatches = 0;
    let mut oracle_gap: f64 = 0.0;
    let mut max_round_trip: f64 = 0.0;
    let mut clamped_steps = 0;
    let mut path = cfg.keep_path.then(|| {
        let mut p = Vec::with_capacity(cfg.steps + 1);
        p.push(x0.clone());
        p
    });

    for k in 0..cfg.steps {
        let t = k as f64 * h;
        let z = if discrete {
            &mats.b_dagger * &state.x
        } else {
            state.z(mats)
        };
        let vz = 0.5 * z.norm_squared();
        let vx = 0.5 * state.x.norm_squared();
        if !discrete {
            max_round_trip = max_round_trip.max(state.round_trip_residual(mats));
        }

        if k % cfg.stride == 0 {
            let (ratio, abar, vbar, ubar) = if k == 0 {
                (DVector::zeros(m), DVector::zeros(n), DVector::zeros(m), DVector::zeros(dim))
            } else {
                (
                    (&state.x - &x0) / t,
                    &a_acc.sum / t,
                    &v_acc.sum / t,
                    &u_acc.sum / t,
                )
            };
            samples.push(Sample {
                t,
                x: state.x.clone(),
                ratio,
                z: z.clone(),
                eps: values(&eps_ex),
                abar,
                vbar,
                ubar,
                lyapunov: if kind == ControllerKind::Full { vz } else { vx },
            });
        }
        lyapunov_z.push(vz);
        lyapunov_x.push(vx);

        let x_oracle = oracle_exact(&eps_ex, &s_ex, &eps0, &x0)?;
        oracle_gap = oracle_gap.max((values(&x_oracle) - &state.x).amax());
        let sgn = DVector::from_iterator(m, x_oracle.iter().map(Expansion::signum));
        if sgn != sign_vector(&state.x) {
            oracle_mismatches += 1;
        }
        let decision = rule.decide(&Observation {
            x: &state.x,
            x0: &x0,
            z: &z,
            sgn_x: &sgn,
        });
        clamped_steps += decision.clamped as usize;
        let u = decision.u;
        let v = source.sample(rng);

        let x_dot = &mats.b * u.values() - v.values();
        if state.x.lp_norm(1) > cfg.zero_band {
            attain.off_sum += state.x.dot(&x_dot);
            attain.off_count += 1;
        } else {
            attain.band_drift_sum += &x_dot;
            attain.band_count += 1;
        }

        if !discrete && k >= 1 {
            let ybar = (&state.x - &x0) / t;
            approach.sum += ybar.dot(&x_dot);
            approach.count += 1;
        }

        sys.check_step(&u, &v)?;
        let a = u.allocation();
        let surplus = u.surplus();
        let sums = sys.index().coalition_sums(&a);
        for j in 0..m {
            let e = (sums[j] - v.values()[j]) * h;
            eps_ex[j].add(e);
            x_ex[j].add(e);
            if j + 1 < m {
                let sj = surplus[j] * h;
                x_ex[j].add(-sj);
                s_ex[j].add(sj);
            }
        }
        let x_next = values(&x_ex);
        if discrete && k >= 1 {
            let ybar = (&state.x - &x0) / k as f64;
            approach.sum += ybar.dot(&(&x_next - &state.x));
            approach.count += 1;
        }
        let y_next = if discrete {
            state.y
        } else {
            state.y + (&mats.c * (u.values() - sys.u_nom().values())) * h
        };
        state = FlowState {
            x: x_next,
            y: y_next,
            t: t + h,
            x0: state.x0,
        };
        a_acc.add_scaled(&a, h);
        v_acc.add_scaled(v.values(), h);
        u_acc.add_scaled(u.values(), h);

        if !state.x.iter().chain(state.y.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "state became non-finite at step {} (t = {})",
                k + 1,
                t + h
            )));
        }
        if let Some(p) = path.as_mut() {
            p.push(state.x.clone());
        }
    }

    let z_final = if discrete {
        &mats.b_dagger * &state.x
    } else {
        state.z(mats)
    };
    Ok(TrajectoryRecord {
        kind,
        discrete,
        dt: h,
        steps: cfg.steps,
        samples,
        lyapunov_z,
        lyapunov_x,
        x0,
        x_final: state.x,
        z_final,
        eps0,
        eps_final: values(&eps_ex),
        a_integral: a_acc.sum,
        s_integral: values(&s_ex),
        v_integral: v_acc.sum,
        u_integral: u_acc.sum,
        attain,
        approach,
        oracle_mismatches,
        oracle_gap,
        max_round_trip,
        clamped_steps,
        path,
    })
}
