//! Experiment configuration read from TOML.
//!
//! ```toml
//! [game]
//! players = 3
//! lower = [0, 0, 0, 0, 0, 0, 0]       # value box, one entry per coalition
//! upper = [4, 4, 4, 4, 6, 7, 12]
//! v_nom = [1, 2, 3, 4, 5, 6, 10]
//! u_nom = [2.5, 3, 4.5, 1.5, 1, 1.5, 1.5, 2, 1.5]   # or a_nom = [...]
//!
//! [bounds]              # optional; defaults a_min = 0, a_max = surplus_cap = v_N
//! a_min = 0             # scalar or per-player array
//! a_max = 10
//! surplus_cap = 10
//!
//! [controller]
//! kind = "full"         # full | partial | discrete-approach | stationary
//! delta = 1.0           # partial and discrete-approach only
//! thresholds = "componentwise"   # or "scalar"
//!
//! [generator]           # optional
//! sampling = "centered" # or "uniform"
//! max_tries = 100000
//!
//! [sim]
//! dt = 0.05
//! steps = 20000
//! trials = 1
//! pairs = 10
//! seed = 1
//! stride = 100
//! x0 = 10.0             # scalar or per-coalition array, default 0
//! epsilon0 = 10.0       # scalar or per-coalition array, default 0
//! y0 = [0, 0]           # default 0
//! zero_band = 0.5       # default 10 * delta * dt
//! burn_in = 0
//! workers = 4           # default: available parallelism
//!
//! [output]              # optional
//! dir = "out"
//! trajectory = "trajectory.csv"
//! summary = "summary.txt"
//! ```
//!
//! Unknown keys are errors. Every problem found is reported, each with its
//! dotted key path.

use std::fmt;
use std::path::PathBuf;

use nalgebra::DVector;
use toml::{Table, Value};

use crate::coalition::{AllocationBounds, CoalitionIndex, ControlVector, FeasibleSet, GameVector, MAX_PLAYERS};
use crate::control::{ControllerKind, ThresholdMode};
use crate::sim::{FlowSystem, SimConfig, DEFAULT_STRIDE, NOMINAL_TOL};
use crate::source::{GameBox, SupportSampling, DEFAULT_MAX_TRIES};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// All problems found in one configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub violations: Vec<Violation>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration ({} problem(s)):", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  {v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub players: usize,
    pub box_lower: DVector<f64>,
    pub box_upper: DVector<f64>,
    pub v_nom: DVector<f64>,
    pub u_nom: DVector<f64>,
    pub a_min: DVector<f64>,
    pub a_max: DVector<f64>,
    pub surplus_cap: f64,
    pub controller: ControllerKind,
    pub delta: Option<f64>,
    pub thresholds: ThresholdMode,
    pub sampling: SupportSampling,
    pub max_tries: usize,
    pub dt: f64,
    pub steps: usize,
    pub trials: usize,
    pub pairs: usize,
    pub seed: u64,
    pub stride: usize,
    pub x0: Option<DVector<f64>>,
    pub epsilon0: Option<DVector<f64>>,
    pub y0: Option<DVector<f64>>,
    pub zero_band: Option<f64>,
    pub burn_in: usize,
    pub workers: Option<usize>,
    pub out_dir: PathBuf,
    pub trajectory_file: String,
    pub summary_file: String,
}

impl ExperimentConfig {
    pub fn coalitions(&self) -> usize {
        (1usize << self.players) - 1
    }

    pub fn index(&self) -> CoalitionIndex {
        CoalitionIndex::enumerate(self.players).expect("validated player count")
    }

    pub fn system(&self) -> crate::Result<FlowSystem> {
        let index = self.index();
        let bounds = AllocationBounds::new(self.a_min.clone(), self.a_max.clone())?;
        let feasible = FeasibleSet::new(&index, &bounds, self.surplus_cap)?;
        let v_nom = GameVector::new(self.v_nom.clone())?;
        let u_nom = ControlVector::new(self.players, self.u_nom.clone())?;
        FlowSystem::new(index, v_nom, u_nom, feasible)
    }

    pub fn value_box(&self) -> crate::Result<GameBox> {
        GameBox::new(self.box_lower.clone(), self.box_upper.clone())
    }

    /// Step size actually used: discrete runs always step by one.
    pub fn effective_dt(&self) -> f64 {
        if self.controller.is_discrete() {
            1.0
        } else {
            self.dt
        }
    }

    pub fn zero_band(&self) -> f64 {
        self.zero_band
            .unwrap_or_else(|| 10.0 * self.delta.unwrap_or(1.0) * self.effective_dt())
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            dt: self.effective_dt(),
            steps: self.steps,
            stride: self.stride,
            seed: self.seed,
            trials: self.trials,
            epsilon0: self.epsilon0.clone(),
            x0: self.x0.clone(),
            y0: self.y0.clone(),
            zero_band: self.zero_band(),
            keep_path: false,
        }
    }

    pub fn trajectory_path(&self) -> PathBuf {
        self.out_dir.join(&self.trajectory_file)
    }

    pub fn summary_path(&self) -> PathBuf {
        self.out_dir.join(&self.summary_file)
    }
}

const SECTIONS: &[(&str, &[&str])] = &[
    ("game", &["players", "lower", "upper", "v_nom", "u_nom", "a_nom"]),
    ("bounds", &["a_min", "a_max", "surplus_cap"]),
    ("controller", &["kind", "delta", "thresholds"]),
    ("generator", &["sampling", "max_tries"]),
    (
        "sim",
        &[
            "dt", "steps", "trials", "pairs", "seed", "stride", "x0", "epsilon0", "y0", "zero_band",
            "burn_in", "workers",
        ],
    ),
    ("output", &["dir", "trajectory", "summary"]),
];

struct Reader<'a> {
    root: &'a Table,
    violations: Vec<Violation>,
}

impl<'a> Reader<'a> {
    fn fail(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.into(),
            message: message.into(),
        });
    }

    fn get(&self, section: &str, key: &str) -> Option<&'a Value> {
        self.root.get(section)?.as_table()?.get(key)
    }

    fn require(&mut self, section: &str, key: &str) -> Option<&'a Value> {
        let v = self.get(section, key);
        if v.is_none() {
            self.fail(format!("{section}.{key}"), "missing required key");
        }
        v
    }

    fn number(&mut self, path: &str, v: &Value) -> Option<f64> {
        match v {
            Value::Float(f) if f.is_finite() => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            _ => {
                self.fail(path, format!("expected a finite number, got {v}"));
                None
            }
        }
    }

    fn float(&mut self, section: &str, key: &str, required: bool) -> Option<f64> {
        let v = if required {
            self.require(section, key)
        } else {
            self.get(section, key)
        }?;
        self.number(&format!("{section}.{key}"), v)
    }

    fn integer(&mut self, section: &str, key: &str, required: bool, min: i64) -> Option<i64> {
        let path = format!("{section}.{key}");
        let v = if required {
            self.require(section, key)
        } else {
            self.get(section, key)
        }?;
        match v.as_integer() {
            Some(i) if i >= min => Some(i),
            Some(i) => {
                self.fail(path, format!("must be at least {min}, got {i}"));
                None
            }
            None => {
                self.fail(path, format!("expected an integer, got {v}"));
                None
            }
        }
    }

    fn string(&mut self, section: &str, key: &str) -> Option<&'a str> {
        let v = self.get(section, key)?;
        let s = v.as_str();
        if s.is_none() {
            self.fail(format!("{section}.{key}"), format!("expected a string, got {v}"));
        }
        s
    }

    fn vector(&mut self, section: &str, key: &str, required: bool) -> Option<DVector<f64>> {
        let path = format!("{section}.{key}");
        let v = if required {
            self.require(section, key)
        } else {
            self.get(section, key)
        }?;
        let Some(items) = v.as_array() else {
            self.fail(path, format!("expected an array of numbers, got {v}"));
            return None;
        };
        let mut out = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            out.push(self.number(&format!("{path}[{i}]"), item)?);
        }
        Some(DVector::from_vec(out))
    }

    /// A scalar broadcast to `len`, or an array of exactly `len` numbers.
    fn scalar_or_vector(&mut self, section: &str, key: &str, len: Option<usize>) -> Option<DVector<f64>> {
        let path = format!("{section}.{key}");
        let v = self.get(section, key)?;
        if v.is_array() {
            let out = self.vector(section, key, false)?;
            self.check_len(&path, &out, len);
            Some(out)
        } else {
            let x = self.number(&path, v)?;
            Some(DVector::from_element(len?, x))
        }
    }

    fn check_len(&mut self, path: &str, v: &DVector<f64>, len: Option<usize>) -> bool {
        match len {
            Some(len) if v.len() != len => {
                self.fail(path, format!("has {} entries, expected {len}", v.len()));
                false
            }
            _ => true,
        }
    }
}

/// Parses and cross-checks a configuration, collecting every violation.
pub fn validate_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let root: Table = match text.parse() {
        Ok(t) => t,
        Err(e) => {
            return Err(ConfigError {
                violations: vec![Violation {
                    path: "<toml>".into(),
                    message: e.to_string().trim().to_string(),
                }],
            })
        }
    };
    let mut r = Reader {
        root: &root,
        violations: Vec::new(),
    };

    for (name, value) in &root {
        match SECTIONS.iter().find(|(s, _)| s == name) {
            None => r.fail(name.clone(), "unknown section"),
            Some((_, keys)) => match value.as_table() {
                None => r.fail(name.clone(), "expected a table"),
                Some(t) => {
                    for key in t.keys() {
                        if !keys.contains(&key.as_str()) {
                            r.fail(format!("{name}.{key}"), "unknown key");
                        }
                    }
                }
            },
        }
    }

    // [game]
    let players = r.integer("game", "players", true, 1).and_then(|n| {
        if n as usize > MAX_PLAYERS {
            r.fail("game.players", format!("at most {MAX_PLAYERS} players supported, got {n}"));
            None
        } else {
            Some(n as usize)
        }
    });
    let m = players.map(|n| (1usize << n) - 1);
    let dim = players.zip(m).map(|(n, m)| n + m - 1);

    let v_nom = r.vector("game", "v_nom", true);
    if let (Some(v), Some(m)) = (&v_nom, m) {
        if v.len() != m {
            r.fail(
                "game.v_nom",
                format!(
                    "has {} entries but {} players need 2^{} - 1 = {m}",
                    v.len(),
                    players.unwrap(),
                    players.unwrap()
                ),
            );
        }
    }
    let lower = r.vector("game", "lower", true);
    let upper = r.vector("game", "upper", true);
    let box_ok = [("game.lower", &lower), ("game.upper", &upper)]
        .into_iter()
        .map(|(p, v)| v.as_ref().is_some_and(|v| r.check_len(p, v, m)))
        .fold(true, |a, b| a & b);
    if let (true, Some(lo), Some(hi)) = (box_ok, &lower, &upper) {
        for i in 0..lo.len() {
            if lo[i] > hi[i] {
                r.fail(format!("game.lower[{i}]"), format!("{} exceeds game.upper[{i}] = {}", lo[i], hi[i]));
            }
        }
    }

    let u_direct = r.vector("game", "u_nom", false);
    let a_nom = r.vector("game", "a_nom", false);
    let u_nom = match (u_direct, a_nom) {
        (Some(_), Some(_)) => {
            r.fail("game", "give either u_nom or a_nom, not both");
            None
        }
        (None, None) => {
            r.fail("game.u_nom", "missing required key (or give game.a_nom)");
            None
        }
        (Some(u), None) => r.check_len("game.u_nom", &u, dim).then_some(u),
        (None, Some(a)) => match (players, &v_nom) {
            (Some(n), Some(v)) if r.check_len("game.a_nom", &a, Some(n)) && v.len() == m.unwrap() => {
                let index = CoalitionIndex::enumerate(n).expect("validated");
                let sums = index.coalition_sums(&a);
                let s = (&sums - v).rows(0, v.len() - 1).into_owned();
                Some(ControlVector::from_parts(&a, &s).values().clone())
            }
            _ => None,
        },
    };

    // [bounds]
    let v_grand = v_nom.as_ref().filter(|v| !v.is_empty()).map(|v| v[v.len() - 1]);
    let a_min = r
        .scalar_or_vector("bounds", "a_min", players)
        .or_else(|| players.map(DVector::zeros));
    let a_max = r
        .scalar_or_vector("bounds", "a_max", players)
        .or_else(|| players.zip(v_grand).map(|(n, g)| DVector::from_element(n, g)));
    let surplus_cap = r.float("bounds", "surplus_cap", false).or(v_grand);
    if let Some(c) = surplus_cap.filter(|&c| c < 0.0) {
        r.fail("bounds.surplus_cap", format!("must be non-negative, got {c}"));
    }
    if let (Some(lo), Some(hi)) = (&a_min, &a_max) {
        if lo.len() == hi.len() {
            for i in 0..lo.len() {
                if lo[i] > hi[i] {
                    r.fail(format!("bounds.a_min[{i}]"), format!("{} exceeds bounds.a_max[{i}] = {}", lo[i], hi[i]));
                }
            }
        }
    }

    // [controller]
    let controller = match r.get("controller", "kind") {
        None => {
            r.fail("controller.kind", "missing required key");
            None
        }
        Some(_) => r.string("controller", "kind").and_then(|s| match s.parse() {
            Ok(k) => Some(k),
            Err(e) => {
                r.fail("controller.kind", e);
                None
            }
        }),
    };
    let delta = r.float("controller", "delta", false);
    if let Some(d) = delta.filter(|&d| !(d > 0.0)) {
        r.fail("controller.delta", format!("must be positive, got {d}"));
    }
    if delta.is_none()
        && matches!(controller, Some(ControllerKind::Partial | ControllerKind::DiscreteApproach))
    {
        r.fail("controller.delta", "required for partial and discrete-approach controllers");
    }
    let thresholds = match r.string("controller", "thresholds") {
        None => ThresholdMode::default(),
        Some(s) => s.parse().unwrap_or_else(|e| {
            r.fail("controller.thresholds", e);
            ThresholdMode::default()
        }),
    };

    // [generator]
    let sampling = match r.string("generator", "sampling") {
        None | Some("centered") => SupportSampling::Centered,
        Some("uniform") => SupportSampling::Uniform,
        Some(other) => {
            r.fail("generator.sampling", format!("unknown sampling `{other}` (expected centered or uniform)"));
            SupportSampling::Centered
        }
    };
    let max_tries = r
        .integer("generator", "max_tries", false, 1)
        .map_or(DEFAULT_MAX_TRIES, |v| v as usize);

    // [sim]
    let dt = r.float("sim", "dt", true);
    if let Some(d) = dt.filter(|&d| !(d > 0.0)) {
        r.fail("sim.dt", format!("must be positive, got {d}"));
    }
    let steps = r.integer("sim", "steps", true, 1);
    let trials = r.integer("sim", "trials", false, 1).unwrap_or(1);
    let pairs = r.integer("sim", "pairs", false, 1).unwrap_or(1);
    let seed = match r.get("sim", "seed") {
        None => 0,
        Some(_) => r.integer("sim", "seed", false, 0).unwrap_or(0) as u64,
    };
    let stride = r
        .integer("sim", "stride", false, 1)
        .map_or(DEFAULT_STRIDE, |v| v as usize);
    let x0 = r.scalar_or_vector("sim", "x0", m);
    let epsilon0 = r.scalar_or_vector("sim", "epsilon0", m);
    let y0 = r.vector("sim", "y0", false);
    if let (Some(y), Some(n)) = (&y0, players) {
        r.check_len("sim.y0", y, Some(n - 1));
    }
    let zero_band = r.float("sim", "zero_band", false);
    if let Some(b) = zero_band.filter(|&b| b < 0.0) {
        r.fail("sim.zero_band", format!("must be non-negative, got {b}"));
    }
    let burn_in = r.integer("sim", "burn_in", false, 0).unwrap_or(0) as usize;
    let workers = r.integer("sim", "workers", false, 1).map(|w| w as usize);
    if let Some(s) = steps.filter(|&s| burn_in as i64 >= s) {
        r.fail("sim.burn_in", format!("must be smaller than sim.steps = {s}"));
    }

    // [output]
    let out_dir = PathBuf::from(r.string("output", "dir").unwrap_or("out"));
    let trajectory_file = r.string("output", "trajectory").unwrap_or("trajectory.csv").to_string();
    let summary_file = r.string("output", "summary").unwrap_or("summary.txt").to_string();

    // Cross-checks that need several fields.
    if let (Some(u), Some(n), Some(v)) = (&u_nom, players, &v_nom) {
        if v.len() == m.unwrap() {
            let s = u.rows(n, u.len() - n);
            if let Some(j) = s.iter().position(|&x| x < 0.0) {
                r.fail(format!("game.u_nom[{}]", n + j), format!("surplus must be non-negative, got {}", s[j]));
            }
            let index = CoalitionIndex::enumerate(n).expect("validated");
            let b = crate::coalition::augmented_matrix(&index.incidence_matrix());
            let residual = (&b * u - v).amax();
            if residual > NOMINAL_TOL {
                r.fail("game.u_nom", format!("B u_nom differs from v_nom by {residual:e}"));
            }
            if let (Some(lo), Some(hi), Some(cap)) = (&a_min, &a_max, surplus_cap) {
                if lo.len() == n && hi.len() == n {
                    for i in 0..n {
                        if u[i] < lo[i] || u[i] > hi[i] {
                            r.fail(
                                format!("game.u_nom[{i}]"),
                                format!("allocation {} outside [{}, {}]", u[i], lo[i], hi[i]),
                            );
                        }
                    }
                    if let Some(j) = s.iter().position(|&x| x > cap) {
                        r.fail(format!("game.u_nom[{}]", n + j), format!("surplus {} exceeds cap {cap}", s[j]));
                    }
                }
            }
        }
    }

    if !r.violations.is_empty() {
        return Err(ConfigError {
            violations: r.violations,
        });
    }
    Ok(ExperimentConfig {
        players: players.unwrap(),
        box_lower: lower.unwrap(),
        box_upper: upper.unwrap(),
        v_nom: v_nom.unwrap(),
        u_nom: u_nom.unwrap(),
        a_min: a_min.unwrap(),
        a_max: a_max.unwrap(),
        surplus_cap: surplus_cap.unwrap(),
        controller: controller.unwrap(),
        delta,
        thresholds,
        sampling,
        max_tries,
        dt: dt.unwrap(),
        steps: steps.unwrap() as usize,
        trials: trials as usize,
        pairs: pairs as usize,
        seed,
        stride,
        x0,
        epsilon0,
        y0,
        zero_band,
        burn_in,
        workers,
        out_dir,
        trajectory_file,
        summary_file,
    })
}
