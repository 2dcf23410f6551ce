#![allow(dead_code)]

pub mod properties;

use std::fmt::Debug;
use std::path::PathBuf;

use coalflow::coalition::{
    augmented_matrix, AllocationBounds, CoalitionIndex, ControlVector, FeasibleSet, GameVector,
};
use coalflow::config::{validate_config, ExperimentConfig};
use coalflow::source::GameBox;
use coalflow::FlowSystem;
use nalgebra::DVector;
use proptest::strategy::Strategy;
use proptest::test_runner::{Config, RngSeed, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seed of every property run. Fixed so failures reproduce.
pub const PROPERTY_SEED: u64 = 0x5eed_c0a1;

pub const MIN_CASES: u32 = 1_000;

pub fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        rng_seed: RngSeed::Fixed(PROPERTY_SEED),
        failure_persistence: None,
        ..Config::default()
    })
}

/// Runs `test` on `cases` inputs drawn from `strategy`.
pub fn check<S>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String>
where
    S: Strategy,
    S::Value: Debug,
{
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut impl Rng, len: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| rng.random_range(lo..hi)))
}

pub const REFERENCE_V_NOM: [f64; 7] = [1., 2., 3., 4., 5., 6., 10.];
pub const REFERENCE_U_NOM: [f64; 9] = [2.5, 3., 4.5, 1.5, 1., 1.5, 1.5, 2., 1.5];
pub const REFERENCE_UPPER: [f64; 7] = [4., 4., 4., 4., 6., 7., 12.];

/// Three-player reference game with `a` in `[0, 10]` and surplus cap 10.
pub fn reference_system() -> FlowSystem {
    let index = CoalitionIndex::enumerate(3).unwrap();
    let v_nom = GameVector::from_slice(&REFERENCE_V_NOM).unwrap();
    let u_nom = ControlVector::new(3, DVector::from_row_slice(&REFERENCE_U_NOM)).unwrap();
    let bounds = AllocationBounds::uniform(3, 0.0, 10.0).unwrap();
    let feasible = FeasibleSet::new(&index, &bounds, 10.0).unwrap();
    FlowSystem::new(index, v_nom, u_nom, feasible).unwrap()
}

pub fn reference_box() -> GameBox {
    GameBox::new(DVector::zeros(7), DVector::from_row_slice(&REFERENCE_UPPER)).unwrap()
}

/// Random `n`-player system whose nominal game is defined as `B u_nom`,
/// with `u_nom` strictly inside `U`.
pub fn random_system(rng: &mut impl Rng, n: usize) -> FlowSystem {
    let index = CoalitionIndex::enumerate(n).unwrap();
    let m = index.len();
    let a = uniform_vec(rng, n, 0.5, 4.0);
    let s = uniform_vec(rng, m - 1, 0.1, 3.0);
    let u_nom = ControlVector::from_parts(&a, &s);
    let b = augmented_matrix(&index.incidence_matrix());
    let v_nom = GameVector::new(&b * u_nom.values()).unwrap();
    let bounds = AllocationBounds::uniform(n, 0.0, 5.0).unwrap();
    let feasible = FeasibleSet::new(&index, &bounds, 4.0).unwrap();
    FlowSystem::new(index, v_nom, u_nom, feasible).unwrap()
}

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn load_config(name: &str) -> ExperimentConfig {
    let path = configs_dir().join(name);
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()));
    validate_config(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
