//! Randomized invariants, each a named check returning `Err` with the
//! minimal failing input. Every check runs at least `MIN_CASES` cases from
//! a fixed seed.

use std::cell::Cell;
use std::sync::OnceLock;

use coalflow::coalition::{
    augmented_matrix, core_membership, is_balanced, CoalitionIndex, ControlVector, ExcessState,
    GameVector,
};
use coalflow::config::validate_config;
use coalflow::control::{
    oracle_sign, AllocationRule, DiscreteApproachController, FullInfoController, Observation,
    PartialInfoController, StationaryController, ThresholdMode,
};
use coalflow::diagnostics::{approach_from_path, approachability_stat, lyapunov, target_membership};
use coalflow::experiment::{run_experiment, summary_text, write_trajectory_csv};
use coalflow::linalg::{saturate, sign_vector, SystemMatrices};
use coalflow::sim::{run_discrete, run_trajectory, trial_rng, SimConfig};
use coalflow::source::{
    generate_support, ConstantSource, FiniteSupportProcess, GameBox, SupplyChainGame,
    SupportSampling,
};
use coalflow::FlowSystem;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use super::{check, reference_box, reference_system, random_system, rng, uniform_vec, MIN_CASES};

pub type Property = fn() -> Result<(), String>;

pub const PROPERTIES: &[(&str, Property)] = &[
    ("augmented_matrix_identity", augmented_matrix_identity),
    ("incidence_sums", incidence_sums),
    ("core_membership_monotone", core_membership_monotone),
    ("balanced_matches_vertex_enumeration", balanced_matches_vertex_enumeration),
    ("excess_update_additive", excess_update_additive),
    ("completion_identities", completion_identities),
    ("saturate_idempotent_nonexpansive", saturate_idempotent_nonexpansive),
    ("sign_vector_odd", sign_vector_odd),
    ("generated_support_valid", generated_support_valid),
    ("support_mean_ergodic", support_mean_ergodic),
    ("supply_chain_contained", supply_chain_contained),
    ("nominal_fixed_point", nominal_fixed_point),
    ("round_trip", round_trip),
    ("z_step", z_step),
    ("integral_consistency", integral_consistency),
    ("discrete_continuous_agree", discrete_continuous_agree),
    ("controllers_feasible", controllers_feasible),
    ("full_descent_pairing", full_descent_pairing),
    ("partial_descent_identity", partial_descent_identity),
    ("zero_state_neutral", zero_state_neutral),
    ("empirical_approachability", empirical_approachability),
    ("oracle_sign_exact", oracle_sign_exact),
    ("oracle_matches_state", oracle_matches_state),
    ("lyapunov_quadratic", lyapunov_quadratic),
    ("approach_stat_matches_path", approach_stat_matches_path),
    ("tau_grand_identity", tau_grand_identity),
    ("rerun_byte_identical", rerun_byte_identical),
    ("csv_row_count", csv_row_count),
];

/// A few reference supports, generated once.
fn reference_supports() -> &'static [FiniteSupportProcess] {
    static SUPPORTS: OnceLock<Vec<FiniteSupportProcess>> = OnceLock::new();
    SUPPORTS.get_or_init(|| {
        let v_nom = GameVector::from_slice(&super::REFERENCE_V_NOM).unwrap();
        (0..16)
            .map(|i| {
                generate_support(&reference_box(), &v_nom, SupportSampling::Centered, &mut rng(1000 + i), 100_000)
                    .unwrap()
                    .process
            })
            .collect()
    })
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Random feasible control for `sys`.
fn random_control(rng: &mut impl Rng, sys: &FlowSystem) -> ControlVector {
    let lo = sys.feasible().lower();
    let hi = sys.feasible().upper();
    let values = DVector::from_iterator(lo.len(), (0..lo.len()).map(|i| rng.random_range(lo[i]..=hi[i])));
    ControlVector::new(sys.index().players(), values).unwrap()
}

/// Random vector with entries spread over several orders of magnitude and
/// some exact zeros.
fn wild_vec(rng: &mut impl Rng, len: usize) -> DVector<f64> {
    DVector::from_iterator(
        len,
        (0..len).map(|_| {
            if rng.random_bool(0.1) {
                0.0
            } else {
                let mag = 10f64.powf(rng.random_range(-3.0..3.0));
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            }
        }),
    )
}

// ---- coalition-core ----

pub fn augmented_matrix_identity() -> Result<(), String> {
    check(MIN_CASES, (1usize..=6, any::<u64>()), |(n, seed)| {
        let mut r = rng(seed);
        let index = CoalitionIndex::enumerate(n).unwrap();
        let m = index.len();
        // Built from bitmasks, independently of `incidence_matrix`.
        let bh = DMatrix::from_fn(m, n, |j, i| ((index.get(j).mask() >> i) & 1) as f64);
        let b = augmented_matrix(&index.incidence_matrix());
        prop_assert_eq!(b.shape(), (m, n + m - 1));
        let a = uniform_vec(&mut r, n, -5.0, 5.0);
        let s = uniform_vec(&mut r, m - 1, 0.0, 5.0);
        let u = ControlVector::from_parts(&a, &s);
        let lhs = &b * u.values();
        let mut rhs = &bh * &a;
        for j in 0..m - 1 {
            rhs[j] -= s[j];
        }
        prop_assert_eq!(lhs, rhs);
        Ok(())
    })
}

pub fn incidence_sums() -> Result<(), String> {
    check(MIN_CASES, 1usize..=6, |n| {
        let index = CoalitionIndex::enumerate(n).unwrap();
        let m = index.len();
        prop_assert_eq!(m, (1 << n) - 1);
        let bh = index.incidence_matrix();
        for j in 0..m {
            prop_assert_eq!(bh.row(j).sum(), index.get(j).size() as f64);
        }
        for i in 0..n {
            prop_assert_eq!(bh.column(i).sum(), (1u32 << (n - 1)) as f64);
        }
        let mut masks: Vec<u16> = index.coalitions().iter().map(|c| c.mask()).collect();
        prop_assert_eq!(*masks.last().unwrap(), ((1u32 << n) - 1) as u16);
        prop_assert!(index.coalitions().windows(2).all(|w| w[0].size() <= w[1].size()));
        masks.sort_unstable();
        masks.dedup();
        prop_assert_eq!(masks.len(), m);
        Ok(())
    })
}

pub fn core_membership_monotone() -> Result<(), String> {
    check(MIN_CASES, (2usize..=4, any::<u64>()), |(n, seed)| {
        let mut r = rng(seed);
        let index = CoalitionIndex::enumerate(n).unwrap();
        let m = index.len();
        let a = uniform_vec(&mut r, n, -3.0, 3.0);
        let sums = index.coalition_sums(&a);
        // Either a member by construction or an arbitrary game.
        let mut v = if r.random_bool(0.5) {
            let slack = uniform_vec(&mut r, m, 0.0, 1.0);
            let mut v = &sums - slack;
            v[m - 1] = sums[m - 1];
            v
        } else {
            uniform_vec(&mut r, m, -3.0, 3.0)
        };
        let before = core_membership(&index, &GameVector::new(v.clone()).unwrap(), &a, 0.0);
        for j in 0..m - 1 {
            if r.random_bool(0.5) {
                v[j] -= r.random_range(0.0..2.0);
            }
        }
        let after = core_membership(&index, &GameVector::new(v).unwrap(), &a, 0.0);
        prop_assert!(!before || after);
        Ok(())
    })
}

/// Core nonemptiness by enumerating candidate vertices of
/// `{sum a = v_N, B_H a >= v}`.
fn core_by_vertices(index: &CoalitionIndex, v: &DVector<f64>) -> bool {
    let n = index.players();
    let m = index.len();
    if n == 1 {
        return true;
    }
    let rows: Vec<DVector<f64>> = (0..m)
        .map(|j| DVector::from_fn(n, |i, _| ((index.get(j).mask() >> i) & 1) as f64))
        .collect();
    let proper = m - 1;
    // Every (n-1)-subset of the proper constraints, tight, plus efficiency.
    (0u32..1 << proper)
        .filter(|bits| bits.count_ones() as usize == n - 1)
        .any(|bits| {
            let tight: Vec<usize> = (0..proper).filter(|j| bits >> j & 1 == 1).collect();
            let mut a_mat = DMatrix::zeros(n, n);
            let mut rhs = DVector::zeros(n);
            for (k, &j) in tight.iter().enumerate() {
                a_mat.set_row(k, &rows[j].transpose());
                rhs[k] = v[j];
            }
            a_mat.set_row(n - 1, &rows[m - 1].transpose());
            rhs[n - 1] = v[m - 1];
            if a_mat.determinant().abs() < 1e-12 {
                return false;
            }
            let Some(a) = a_mat.lu().solve(&rhs) else {
                return false;
            };
            (0..proper).all(|j| rows[j].dot(&a) >= v[j] - 1e-9)
        })
}

pub fn balanced_matches_vertex_enumeration() -> Result<(), String> {
    check(MIN_CASES, (1usize..=3, 0..=i64::MAX as u64), |(n, seed)| {
        let mut r = rng(seed);
        let index = CoalitionIndex::enumerate(n).unwrap();
        let m = index.len();
        let v = DVector::from_fn(m, |j, _| {
            let size = index.get(j).size() as f64;
            let hi = if j + 1 == m { 3.0 * size } else { 2.0 * size };
            r.random_range(0.0..hi)
        });
        let lp = is_balanced(&index, &GameVector::new(v.clone()).unwrap()).unwrap();
        prop_assert_eq!(lp, core_by_vertices(&index, &v), "v = {}", v.transpose());
        Ok(())
    })
}

pub fn excess_update_additive() -> Result<(), String> {
    check(MIN_CASES, (1usize..=4, 1usize..=8, any::<u64>()), |(n, k, seed)| {
        let mut r = rng(seed);
        let index = CoalitionIndex::enumerate(n).unwrap();
        let m = index.len();
        let eps0 = uniform_vec(&mut r, m, -2.0, 2.0);
        let mut state = ExcessState::new(eps0.clone());
        let mut direct = eps0.clone();
        for _ in 0..k {
            let dt = r.random_range(0.01..1.0);
            let a = uniform_vec(&mut r, n, 0.0, 5.0);
            let v = uniform_vec(&mut r, m, 0.0, 10.0);
            state = state.update(&index, &a, &GameVector::new(v.clone()).unwrap(), dt).unwrap();
            for j in 0..m {
                let mask = index.get(j).mask();
                let share: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).sum();
                direct[j] += dt * (share - v[j]);
            }
        }
        prop_assert!((&state.epsilon - &direct).amax() <= 1e-12 * (1.0 + direct.amax()));
        prop_assert_eq!(&state.epsilon0, &eps0);

        // Constant input: k steps of dt against one step of k dt.
        let dt = r.random_range(0.01..1.0);
        let a = uniform_vec(&mut r, n, 0.0, 5.0);
        let v = GameVector::new(uniform_vec(&mut r, m, 0.0, 10.0)).unwrap();
        let mut stepped = ExcessState::new(eps0.clone());
        for _ in 0..k {
            stepped = stepped.update(&index, &a, &v, dt).unwrap();
        }
        let once = ExcessState::new(eps0).update(&index, &a, &v, k as f64 * dt).unwrap();
        prop_assert!((&stepped.epsilon - &once.epsilon).amax() <= 1e-12 * (1.0 + once.epsilon.amax()));
        Ok(())
    })
}

// ---- linear-ops ----

pub fn completion_identities() -> Result<(), String> {
    check(MIN_CASES, (1usize..=10, 0usize..=10, any::<u64>()), |(rows, extra, seed)| {
        let cols = (rows + extra).min(20);
        let mut r = rng(seed);
        let b = DMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0));
        let mats = SystemMatrices::new(b.clone()).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let tol = 1e-9;
        prop_assert!(max_abs(&(&b * &mats.b_dagger - DMatrix::identity(rows, rows))) <= tol);
        let mut top = DMatrix::zeros(cols, cols);
        top.view_mut((0, 0), (rows, cols)).copy_from(&b);
        top.view_mut((rows, 0), (cols - rows, cols)).copy_from(&mats.c);
        let mut right = DMatrix::zeros(cols, cols);
        right.view_mut((0, 0), (cols, rows)).copy_from(&mats.b_dagger);
        right.view_mut((0, rows), (cols, cols - rows)).copy_from(&mats.f);
        prop_assert!(max_abs(&(top * right - DMatrix::identity(cols, cols))) <= tol);
        prop_assert!(max_abs(&(&b * &mats.f)) <= tol);
        prop_assert!(max_abs(&(&mats.c * &mats.b_dagger)) <= tol);
        // Moore-Penrose: B† B is symmetric.
        let p = &mats.b_dagger * &b;
        prop_assert!(max_abs(&(&p - p.transpose())) <= tol);
        Ok(())
    })
}

pub fn saturate_idempotent_nonexpansive() -> Result<(), String> {
    check(MIN_CASES, (1usize..=20, any::<u64>()), |(len, seed)| {
        let mut r = rng(seed);
        let lo = uniform_vec(&mut r, len, -3.0, 1.0);
        let hi = DVector::from_fn(len, |i, _| {
            if r.random_bool(0.1) {
                lo[i]
            } else {
                lo[i] + r.random_range(0.0..4.0)
            }
        });
        let xi = uniform_vec(&mut r, len, -6.0, 6.0);
        let eta = uniform_vec(&mut r, len, -6.0, 6.0);
        let sx = saturate(&xi, &lo, &hi).unwrap();
        let se = saturate(&eta, &lo, &hi).unwrap();
        prop_assert_eq!(&saturate(&sx, &lo, &hi).unwrap(), &sx);
        prop_assert!((&sx - &se).amax() <= (&xi - &eta).amax());
        prop_assert!((0..len).all(|i| sx[i] >= lo[i] && sx[i] <= hi[i]));
        Ok(())
    })
}

pub fn sign_vector_odd() -> Result<(), String> {
    check(MIN_CASES, (1usize..=20, any::<u64>()), |(len, seed)| {
        let mut r = rng(seed);
        let mut x = wild_vec(&mut r, len);
        if r.random_bool(0.2) {
            x[0] = -0.0;
        }
        let s = sign_vector(&x);
        prop_assert_eq!(sign_vector(&(-&x)), -&s);
        for i in 0..len {
            let expected = if x[i] > 0.0 {
                1.0
            } else if x[i] < 0.0 {
                -1.0
            } else {
                0.0
            };
            prop_assert_eq!(s[i], expected);
        }
        Ok(())
    })
}

// ---- game-source ----

pub fn generated_support_valid() -> Result<(), String> {
    check(MIN_CASES, (0u8..3, any::<u64>()), |(mode, seed)| {
        let mut r = rng(seed);
        let (value_box, v_nom, sampling) = match mode {
            0 => (
                reference_box(),
                DVector::from_row_slice(&super::REFERENCE_V_NOM),
                SupportSampling::Centered,
            ),
            _ => {
                let m = [1, 3, 7][r.random_range(0..3)];
                let lower = uniform_vec(&mut r, m, -5.0, 5.0);
                let width = uniform_vec(&mut r, m, 0.5, 5.0);
                let upper = &lower + &width;
                let v = DVector::from_fn(m, |i, _| lower[i] + width[i] * r.random_range(0.3..0.7));
                let sampling = if mode == 1 || m == 7 {
                    SupportSampling::Centered
                } else {
                    SupportSampling::Uniform
                };
                (GameBox::new(lower, upper).unwrap(), v, sampling)
            }
        };
        let target = GameVector::new(v_nom.clone()).unwrap();
        let got = generate_support(&value_box, &target, sampling, &mut r, 100_000)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let proc = got.process;
        let (rm, p) = (proc.support(), proc.probabilities());
        prop_assert!((rm * p - &v_nom).amax() <= 1e-9);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
        for j in 0..rm.ncols() {
            prop_assert!(value_box.contains(&rm.column(j).into_owned(), 0.0));
        }
        Ok(())
    })
}

pub fn support_mean_ergodic() -> Result<(), String> {
    const DRAWS: usize = 100_000;
    let misses = Cell::new(0usize);
    let cases = MIN_CASES;
    let v_nom = GameVector::from_slice(&super::REFERENCE_V_NOM).unwrap();
    check(cases, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let proc = generate_support(&reference_box(), &v_nom, SupportSampling::Centered, &mut r, 100_000)
            .unwrap()
            .process;
        let mut counts = DVector::<f64>::zeros(proc.probabilities().len());
        for _ in 0..DRAWS {
            counts[proc.draw_index(&mut r)] += 1.0;
        }
        let mean = proc.support() * counts / DRAWS as f64;
        let err = (mean - v_nom.values()).amax() / v_nom.values().amax();
        if err > 0.02 {
            misses.set(misses.get() + 1);
        }
        Ok(())
    })?;
    // At least 99% of seeds must land within 2%.
    if misses.get() * 100 > cases as usize {
        return Err(format!("{} of {cases} seeds missed the 2% band", misses.get()));
    }
    Ok(())
}

pub fn supply_chain_contained() -> Result<(), String> {
    check(MIN_CASES, (1usize..=4, any::<u64>()), |(n, seed)| {
        let mut r = rng(seed);
        let index = CoalitionIndex::enumerate(n).unwrap();
        let k = r.random_range(0.5..20.0);
        let d_min = uniform_vec(&mut r, n, 0.0, 5.0);
        let d_max = DVector::from_fn(n, |i, _| {
            if r.random_bool(0.2) {
                d_min[i]
            } else {
                d_min[i] + r.random_range(0.0..10.0)
            }
        });
        let game = SupplyChainGame::new(k, d_min, d_max).unwrap();
        let bounds = game.bounds(&index).unwrap();
        for _ in 0..10 {
            let d = game.sample_demand(&mut r);
            let v = game.values(&index, &d).unwrap();
            prop_assert!(v.values().iter().all(|&x| x >= 0.0), "v = {}", v.values().transpose());
            prop_assert!(bounds.contains(v.values(), 1e-12));
            for j in 0..n {
                prop_assert_eq!(v.values()[j], 0.0);
            }
        }
        Ok(())
    })
}

// ---- dynamics-sim ----

pub fn nominal_fixed_point() -> Result<(), String> {
    check(MIN_CASES, (0usize..=4, any::<u64>()), |(n, seed)| {
        let mut r = rng(seed);
        let sys = if n == 0 { reference_system() } else { random_system(&mut r, n) };
        let m = sys.m();
        let c_rows = sys.matrices().c.nrows();
        let state = coalflow::FlowState::new(wild_vec(&mut r, m), wild_vec(&mut r, c_rows));
        let dt = r.random_range(0.001..1.0);
        let next = sys.step_continuous(&state, sys.u_nom(), sys.v_nom(), dt).unwrap();
        prop_assert_eq!(&next.x, &state.x);
        prop_assert_eq!(&next.y, &state.y);
        prop_assert_eq!(next.z(sys.matrices()), state.z(sys.matrices()));
        let d = sys.step_discrete(&state.x, sys.u_nom(), sys.v_nom()).unwrap();
        prop_assert_eq!(&d.x_next, &state.x);
        prop_assert!(d.y_next.iter().all(|&y| y == 0.0));
        Ok(())
    })
}

pub fn round_trip() -> Result<(), String> {
    let sys = reference_system();
    let ctrl = FullInfoController::new(&sys, ThresholdMode::Componentwise).unwrap();
    check(MIN_CASES, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let support = &reference_supports()[r.random_range(0..16)];
        let mut cfg = SimConfig::new(0.05, 200);
        cfg.x0 = Some(uniform_vec(&mut r, 7, -10.0, 10.0));
        cfg.y0 = Some(uniform_vec(&mut r, 2, -10.0, 10.0));
        let rec = run_trajectory(&sys, &ctrl, support, &cfg, &mut r).unwrap();
        prop_assert!(rec.max_round_trip <= 1e-7, "residual {}", rec.max_round_trip);
        Ok(())
    })
}

pub fn z_step() -> Result<(), String> {
    check(MIN_CASES, (0usize..=4, any::<u64>()), |(n, seed)| {
        let mut r = rng(seed);
        let sys = if n == 0 { reference_system() } else { random_system(&mut r, n) };
        let mats = sys.matrices();
        let state = coalflow::FlowState::new(
            uniform_vec(&mut r, sys.m(), -5.0, 5.0),
            uniform_vec(&mut r, mats.c.nrows(), -5.0, 5.0),
        );
        let u = random_control(&mut r, &sys);
        let v = GameVector::new(sys.v_nom().values() + uniform_vec(&mut r, sys.m(), -1.0, 1.0)).unwrap();
        let dt = r.random_range(0.001..0.5);
        let next = sys.step_continuous(&state, &u, &v, dt).unwrap();
        // z' = du - B† dv.
        let du = u.values() - sys.u_nom().values();
        let dv = v.values() - sys.v_nom().values();
        let expected = state.z(mats) + (du - &mats.b_dagger * dv) * dt;
        prop_assert!((next.z(mats) - expected).amax() <= 1e-9);
        Ok(())
    })
}

pub fn integral_consistency() -> Result<(), String> {
    let sys = reference_system();
    let ctrl = FullInfoController::new(&sys, ThresholdMode::Componentwise).unwrap();
    let bh = sys.index().incidence_matrix();
    check(MIN_CASES, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let x0 = uniform_vec(&mut r, 7, -0.3, 0.3);
        let eps0 = uniform_vec(&mut r, 7, -1.0, 1.0);
        let source = ConstantSource(
            GameVector::new(sys.v_nom().values() + uniform_vec(&mut r, 7, -0.2, 0.2)).unwrap(),
        );
        let horizon = 2.0;
        let run = |dt: f64| {
            let mut cfg = SimConfig::new(dt, (horizon / dt).round() as usize);
            cfg.x0 = Some(x0.clone());
            cfg.epsilon0 = Some(eps0.clone());
            run_trajectory(&sys, &ctrl, &source, &cfg, &mut trial_rng(seed, 0)).unwrap()
        };
        let runs = [run(0.1), run(0.05), run(0.025)];
        for rec in &runs {
            let integrated = &bh * &rec.a_integral - &rec.v_integral;
            prop_assert!((&rec.eps_final - &rec.eps0 - integrated).amax() <= 1e-9);
        }
        // First order: halving dt again at most halves the change, up to a
        // factor of two.
        let e1 = (&runs[0].eps_final - &runs[1].eps_final).amax();
        let e2 = (&runs[1].eps_final - &runs[2].eps_final).amax();
        prop_assert!(e2 <= 2.0 * (e1 / 2.0) + 1e-12, "e1 = {e1}, e2 = {e2}");
        Ok(())
    })
}

pub fn discrete_continuous_agree() -> Result<(), String> {
    check(MIN_CASES, (0usize..=3, any::<u64>()), |(n, seed)| {
        let mut r = rng(seed);
        let sys = if n == 0 { reference_system() } else { random_system(&mut r, n) };
        let m = sys.m();
        let x0 = uniform_vec(&mut r, m, -5.0, 5.0);
        let mut cont = coalflow::FlowState::new(x0.clone(), DVector::zeros(sys.matrices().c.nrows()));
        let mut disc = x0;
        for _ in 0..50 {
            let u = random_control(&mut r, &sys);
            let v = GameVector::new(sys.v_nom().values() + uniform_vec(&mut r, m, -1.0, 1.0)).unwrap();
            let y_frozen = cont.y.clone();
            cont = sys.step_continuous(&cont, &u, &v, 1.0).unwrap();
            cont.y = y_frozen;
            disc = sys.step_discrete(&disc, &u, &v).unwrap().x_next;
            let scale = 1.0f64.max(disc.amax());
            prop_assert!((&cont.x - &disc).amax() <= 1e-12 * scale);
        }
        Ok(())
    })
}

// ---- controllers ----

pub fn controllers_feasible() -> Result<(), String> {
    let mut r0 = rng(17);
    let systems = [reference_system(), random_system(&mut r0, 1), random_system(&mut r0, 2), random_system(&mut r0, 4)];
    let mut rules: Vec<(usize, Box<dyn AllocationRule>)> = Vec::new();
    for (k, sys) in systems.iter().enumerate() {
        for mode in [ThresholdMode::Scalar, ThresholdMode::Componentwise] {
            rules.push((k, Box::new(FullInfoController::new(sys, mode).unwrap())));
        }
        for delta in [0.1, 0.4, 1.0, 2.5] {
            rules.push((k, Box::new(PartialInfoController::new(sys, delta).unwrap())));
            rules.push((k, Box::new(DiscreteApproachController::new(sys, delta).unwrap())));
        }
    }
    check(100_000, (0..rules.len(), any::<u64>()), |(which, seed)| {
        let mut r = rng(seed);
        let (k, rule) = &rules[which];
        let sys = &systems[*k];
        let m = sys.m();
        let x = wild_vec(&mut r, m);
        let x0 = wild_vec(&mut r, m);
        let z = wild_vec(&mut r, sys.index().control_dim());
        let sgn = sign_vector(&x);
        let d = rule.decide(&Observation { x: &x, x0: &x0, z: &z, sgn_x: &sgn });
        prop_assert!(sys.feasible().contains(&d.u, 0.0), "violation {}", sys.feasible().violation(&d.u));
        Ok(())
    })
}

pub fn full_descent_pairing() -> Result<(), String> {
    let sys = reference_system();
    let ctrls = [
        FullInfoController::new(&sys, ThresholdMode::Scalar).unwrap(),
        FullInfoController::new(&sys, ThresholdMode::Componentwise).unwrap(),
    ];
    check(MIN_CASES, (0usize..2, any::<u64>()), |(which, seed)| {
        let mut r = rng(seed);
        let ctrl = &ctrls[which];
        // Magnitudes well above round-off relative to u_nom.
        let z = wild_vec(&mut r, 9).map(|x| if x != 0.0 && x.abs() < 1e-6 { 1e-6 } else { x });
        let du = ctrl.control(&z).values() - sys.u_nom().values();
        let pairing = z.dot(&du);
        prop_assert!(pairing <= 0.0);
        let (lo, hi) = ctrl.thresholds();
        let active = (0..9).any(|i| (z[i] < 0.0 && hi[i] > 0.0) || (z[i] > 0.0 && lo[i] < 0.0));
        if active {
            prop_assert!(pairing < 0.0, "z = {}", z.transpose());
        }
        Ok(())
    })
}

pub fn partial_descent_identity() -> Result<(), String> {
    let sys = reference_system();
    let b = &sys.matrices().b;
    check(MIN_CASES, (1u32..=300, any::<u64>()), |(delta_centi, seed)| {
        let mut r = rng(seed);
        let delta = delta_centi as f64 / 100.0;
        let ctrl = PartialInfoController::new(&sys, delta).unwrap();
        let x = wild_vec(&mut r, 7);
        let d = ctrl.control(&sign_vector(&x));
        if delta <= 0.4 {
            prop_assert!(!d.clamped);
        }
        if !d.clamped {
            let lhs = x.dot(&(b * (d.u.values() - sys.u_nom().values())));
            let rhs = -delta * x.lp_norm(1);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()), "{lhs} vs {rhs}");
        }
        Ok(())
    })
}

pub fn zero_state_neutral() -> Result<(), String> {
    check(MIN_CASES, (0usize..=4, any::<u64>()), |(n, seed)| {
        let mut r = rng(seed);
        let sys = if n == 0 { reference_system() } else { random_system(&mut r, n) };
        let m = sys.m();
        let dim = sys.index().control_dim();
        let delta = r.random_range(0.01..3.0);
        let zero_z = DVector::from_fn(dim, |_, _| if r.random_bool(0.5) { 0.0 } else { -0.0 });
        let zero_m = DVector::zeros(m);
        let x0 = wild_vec(&mut r, m);
        let u_nom = sys.u_nom();
        for mode in [ThresholdMode::Scalar, ThresholdMode::Componentwise] {
            let full = FullInfoController::new(&sys, mode).unwrap();
            prop_assert_eq!(&full.control(&zero_z), u_nom);
        }
        let partial = PartialInfoController::new(&sys, delta).unwrap();
        let d = partial.control(&zero_m);
        prop_assert_eq!(&d.u, u_nom);
        prop_assert!(!d.clamped);
        let disc = DiscreteApproachController::new(&sys, delta).unwrap();
        prop_assert_eq!(&disc.control(&x0, &x0).u, u_nom);
        let stationary = StationaryController(u_nom.clone());
        let obs = Observation { x: &x0, x0: &x0, z: &zero_z, sgn_x: &zero_m };
        prop_assert_eq!(&stationary.decide(&obs).u, u_nom);
        Ok(())
    })
}

pub fn empirical_approachability() -> Result<(), String> {
    let sys = reference_system();
    let ctrl = DiscreteApproachController::new(&sys, 1.0).unwrap();
    check(MIN_CASES, any::<u64>(), |seed| {
        let support = &reference_supports()[(seed % 16) as usize];
        let cfg = SimConfig::new(1.0, 500);
        let records: Vec<_> = (0..10)
            .map(|t| run_discrete(&sys, &ctrl, support, &cfg, &mut trial_rng(seed, t)).unwrap())
            .collect();
        let stat = approachability_stat(&records).unwrap();
        prop_assert!(stat.mean <= 3.0 * stat.se, "mean {} se {}", stat.mean, stat.se);
        Ok(())
    })
}

/// `k * 2^e` as an integer multiple of `2^-60`.
fn scaled(k: i64, e: i32) -> i128 {
    (k as i128) << (e + 60)
}

pub fn oracle_sign_exact() -> Result<(), String> {
    check(MIN_CASES, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let m = 7;
        let mut draw = || {
            let k = r.random_range(-(1i64 << 50)..(1i64 << 50));
            let e = r.random_range(-60..=10);
            (k as f64 * 2f64.powi(e), scaled(k, e))
        };
        let mut parts: Vec<[(f64, i128); 4]> = (0..m).map(|_| [draw(), draw(), draw(), draw()]).collect();
        // Exact ties on the proper coalitions: eps0 = eps and x0 = s.
        if seed % 4 == 0 {
            for p in parts.iter_mut() {
                p[2] = p[0];
                p[3] = p[1];
            }
        }
        let col = |k: usize| DVector::from_iterator(m, parts.iter().map(|p| p[k].0));
        let (eps, s_all, eps0, x0) = (col(0), col(1), col(2), col(3));
        let s_tilde = s_all.rows(0, m - 1).into_owned();
        let got = oracle_sign(&eps, &s_tilde, &eps0, &x0).unwrap();
        for (j, p) in parts.iter().enumerate() {
            let s = if j + 1 < m { p[1].1 } else { 0 };
            let expected = (p[0].1 - s - p[2].1 + p[3].1).signum() as f64;
            prop_assert_eq!(got[j], expected, "coalition {}", j);
        }
        Ok(())
    })
}

pub fn oracle_matches_state() -> Result<(), String> {
    let sys = reference_system();
    check(MIN_CASES, (1u32..=200, any::<u64>()), |(delta_centi, seed)| {
        let mut r = rng(seed);
        let ctrl = PartialInfoController::new(&sys, delta_centi as f64 / 100.0).unwrap();
        let support = &reference_supports()[r.random_range(0..16)];
        let mut cfg = SimConfig::new(0.05, 300);
        if r.random_bool(0.5) {
            cfg.x0 = Some(uniform_vec(&mut r, 7, -1.0, 1.0));
            cfg.epsilon0 = Some(uniform_vec(&mut r, 7, -1.0, 1.0));
        }
        let rec = run_trajectory(&sys, &ctrl, support, &cfg, &mut r).unwrap();
        prop_assert_eq!(rec.oracle_mismatches, 0);
        prop_assert!(rec.oracle_gap <= 1e-9);
        Ok(())
    })
}

// ---- diagnostics ----

pub fn lyapunov_quadratic() -> Result<(), String> {
    check(MIN_CASES, (1usize..=20, any::<u64>()), |(len, seed)| {
        let mut r = rng(seed);
        let x = wild_vec(&mut r, len);
        let v = lyapunov(&x);
        let direct = 0.5 * x.iter().map(|t| t * t).sum::<f64>();
        prop_assert!((v - direct).abs() <= 1e-14 * direct);
        let c = r.random_range(-10.0..10.0);
        prop_assert!((lyapunov(&(&x * c)) - c * c * v).abs() <= 1e-13 * c * c * v);
        // Powers of two scale without rounding.
        let k = r.random_range(-8..=8);
        let p = 2f64.powi(k);
        prop_assert_eq!(lyapunov(&(&x * p)), p * p * v);
        Ok(())
    })
}

pub fn approach_stat_matches_path() -> Result<(), String> {
    let sys = reference_system();
    let ctrl = DiscreteApproachController::new(&sys, 1.0).unwrap();
    check(MIN_CASES, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let support = &reference_supports()[r.random_range(0..16)];
        let mut cfg = SimConfig::new(1.0, r.random_range(3..300));
        cfg.keep_path = true;
        if r.random_bool(0.5) {
            cfg.x0 = Some(uniform_vec(&mut r, 7, -3.0, 3.0));
        }
        let rec = run_discrete(&sys, &ctrl, support, &cfg, &mut r).unwrap();
        let from_path = approach_from_path(rec.path.as_ref().unwrap()).unwrap();
        let stat = approachability_stat(std::slice::from_ref(&rec)).unwrap();
        prop_assert!((stat.mean - from_path).abs() <= 1e-9 * (1.0 + from_path.abs()), "{} vs {}", stat.mean, from_path);
        Ok(())
    })
}

pub fn tau_grand_identity() -> Result<(), String> {
    let sys = reference_system();
    let full = FullInfoController::new(&sys, ThresholdMode::Componentwise).unwrap();
    let partial = PartialInfoController::new(&sys, 1.0).unwrap();
    check(MIN_CASES, (any::<bool>(), any::<u64>()), |(use_full, seed)| {
        let mut r = rng(seed);
        let rule: &dyn AllocationRule = if use_full { &full } else { &partial };
        let support = &reference_supports()[r.random_range(0..16)];
        let mut cfg = SimConfig::new(0.05, r.random_range(1..300));
        cfg.x0 = Some(uniform_vec(&mut r, 7, -5.0, 5.0));
        cfg.epsilon0 = Some(uniform_vec(&mut r, 7, -5.0, 5.0));
        let rec = run_trajectory(&sys, rule, support, &cfg, &mut r).unwrap();
        let tau = target_membership(&rec, &sys.s_nom()).unwrap().tau;
        let drift = (rec.x_final[6] - rec.x0[6]) / rec.horizon();
        prop_assert!((tau[6] - drift).abs() <= 1e-9, "{} vs {}", tau[6], drift);
        Ok(())
    })
}

// ---- cli / experiment ----

fn small_config(kind: &str, steps: usize, stride: usize, trials: usize, seed: u64) -> coalflow::config::ExperimentConfig {
    let delta = if kind == "full" { String::new() } else { "delta = 0.5\n".to_string() };
    let text = format!(
        "[game]\nplayers = 3\nlower = [0, 0, 0, 0, 0, 0, 0]\nupper = [4, 4, 4, 4, 6, 7, 12]\n\
         v_nom = [1, 2, 3, 4, 5, 6, 10]\nu_nom = [2.5, 3, 4.5, 1.5, 1, 1.5, 1.5, 2, 1.5]\n\
         [bounds]\na_min = 0\na_max = 10\nsurplus_cap = 10\n\
         [controller]\nkind = \"{kind}\"\n{delta}\
         [sim]\ndt = 0.05\nsteps = {steps}\ntrials = {trials}\npairs = 2\nseed = {seed}\nstride = {stride}\nx0 = 1.0\n"
    );
    validate_config(&text).unwrap()
}

const KINDS: [&str; 4] = ["full", "partial", "discrete-approach", "stationary"];

fn csv_bytes(result: &coalflow::experiment::ExperimentResult) -> Vec<u8> {
    let mut out = Vec::new();
    write_trajectory_csv(result, &mut out).unwrap();
    out
}

pub fn rerun_byte_identical() -> Result<(), String> {
    check(MIN_CASES, (0usize..4, 1usize..=60, 1usize..=3, 0..=i64::MAX as u64), |(kind, steps, trials, seed)| {
        let cfg = small_config(KINDS[kind], steps, 7, trials, seed);
        let a = run_experiment(&cfg, Some(1)).unwrap();
        let b = run_experiment(&cfg, Some(3)).unwrap();
        prop_assert!(csv_bytes(&a) == csv_bytes(&b));
        prop_assert_eq!(summary_text(&a), summary_text(&b));
        Ok(())
    })
}

pub fn csv_row_count() -> Result<(), String> {
    check(MIN_CASES, (0usize..4, 1usize..=120, 1usize..=40, 1usize..=3, 0..=i64::MAX as u64), |(kind, steps, stride, trials, seed)| {
        let cfg = small_config(KINDS[kind], steps, stride, trials, seed);
        let result = run_experiment(&cfg, Some(1)).unwrap();
        let text = String::from_utf8(csv_bytes(&result)).unwrap();
        let rows = text.lines().count() - 1;
        prop_assert_eq!(rows, cfg.pairs * trials * steps.div_ceil(stride));
        Ok(())
    })
}
