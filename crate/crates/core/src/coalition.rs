//! Coalitions, game vectors, controls and the core of a TU game.
//!
//! Coalitions are bitmasks over the player set and are laid out in a fixed
//! order: by size, then lexicographically by member list, with the grand
//! coalition last. Every vector indexed by coalitions (values, excesses,
//! flow states) uses this order.

use std::fmt;

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};

use crate::error::{check_finite, check_len, Error, Result};

/// Largest supported player count (4095 coalitions).
pub const MAX_PLAYERS: usize = 12;

/// Feasibility tolerance used when deciding balancedness.
pub const BALANCE_TOL: f64 = 1e-9;

/// A nonempty set of players, bit `i` standing for player `i + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coalition(u16);

impl Coalition {
    pub fn from_mask(mask: u16) -> Self {
        Coalition(mask)
    }

    /// Builds a coalition from 1-based player labels.
    pub fn from_players(players: &[usize]) -> Self {
        Coalition(players.iter().fold(0u16, |acc, &p| acc | (1 << (p - 1))))
    }

    pub fn mask(self) -> u16 {
        self.0
    }

    /// Membership test for a 0-based player index.
    pub fn contains(self, player: usize) -> bool {
        self.0 & (1 << player) != 0
    }

    pub fn size(self) -> usize {
        self.0.count_ones() as usize
    }

    /// 0-based member indices in increasing order.
    pub fn members(self) -> impl Iterator<Item = usize> {
        let mask = self.0;
        (0..16).filter(move |i| mask & (1 << i) != 0)
    }
}

impl fmt::Display for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let labels: Vec<String> = self.members().map(|i| (i + 1).to_string()).collect();
        write!(f, "{{{}}}", labels.join(","))
    }
}

/// Canonical ordering of the `2^n - 1` nonempty coalitions of `n` players.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoalitionIndex {
    players: usize,
    order: Vec<Coalition>,
}

impl CoalitionIndex {
    /// Enumerates all nonempty coalitions, size first, then lexicographic.
    pub fn enumerate(players: usize) -> Result<Self> {
        if !(1..=MAX_PLAYERS).contains(&players) {
            return Err(Error::Domain(format!(
                "player count must be in 1..={MAX_PLAYERS}, got {players}"
            )));
        }
        let mut order: Vec<Coalition> = (1u16..(1u16 << players)).map(Coalition).collect();
        order.sort_by_cached_key(|c| (c.size(), c.members().collect::<Vec<_>>()));
        Ok(CoalitionIndex { players, order })
    }

    pub fn players(&self) -> usize {
        self.players
    }

    /// Number of coalitions `m`.
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Dimension of a control vector, `n + m - 1`.
    pub fn control_dim(&self) -> usize {
        self.players + self.len() - 1
    }

    pub fn coalitions(&self) -> &[Coalition] {
        &self.order
    }

    pub fn get(&self, position: usize) -> Coalition {
        self.order[position]
    }

    pub fn position(&self, coalition: Coalition) -> Option<usize> {
        self.order.iter().position(|&c| c == coalition)
    }

    pub fn grand(&self) -> Coalition {
        self.order[self.order.len() - 1]
    }

    /// The `m x n` incidence matrix whose rows are characteristic vectors.
    pub fn incidence_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.players, |row, col| {
            if self.order[row].contains(col) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Total allocation received by each coalition, i.e. `B_H a`.
    pub fn coalition_sums(&self, a: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.order.iter().map(|c| c.members().map(|i| a[i]).sum::<f64>()),
        )
    }

    pub(crate) fn check_game(&self, v: &GameVector) -> Result<()> {
        check_len("game vector", v.len(), self.len())
    }

    pub(crate) fn check_allocation(&self, a: &DVector<f64>) -> Result<()> {
        check_len("allocation", a.len(), self.players)
    }
}

/// Augments the incidence matrix with `-I` surplus columns for the proper
/// coalitions and a zero block on the grand-coalition row.
pub fn augmented_matrix(incidence: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = incidence.shape();
    let mut b = DMatrix::zeros(m, n + m - 1);
    b.view_mut((0, 0), (m, n)).copy_from(incidence);
    for j in 0..m - 1 {
        b[(j, n + j)] = -1.0;
    }
    b
}

/// Coalition values, one entry per coalition in index order.
#[derive(Clone, Debug, PartialEq)]
pub struct GameVector(DVector<f64>);

impl GameVector {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        check_finite("game vector", values.as_slice())?;
        Ok(GameVector(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn zeros(len: usize) -> Self {
        GameVector(DVector::zeros(len))
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Value of the grand coalition (last entry).
    pub fn grand(&self) -> f64 {
        self.0[self.0.len() - 1]
    }
}

/// Per-player allocation bounds `a_min <= a <= a_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct AllocationBounds {
    pub a_min: DVector<f64>,
    pub a_max: DVector<f64>,
}

impl AllocationBounds {
    pub fn new(a_min: DVector<f64>, a_max: DVector<f64>) -> Result<Self> {
        check_len("a_max", a_max.len(), a_min.len())?;
        if let Some(i) = (0..a_min.len()).find(|&i| a_min[i] > a_max[i]) {
            return Err(Error::Domain(format!(
                "a_min[{i}] = {} exceeds a_max[{i}] = {}",
                a_min[i], a_max[i]
            )));
        }
        Ok(AllocationBounds { a_min, a_max })
    }

    pub fn uniform(players: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(players, lo),
            DVector::from_element(players, hi),
        )
    }
}

/// A control `u = [a; s]`: allocation followed by one surplus per proper
/// coalition.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlVector {
    players: usize,
    values: DVector<f64>,
}

impl ControlVector {
    pub fn new(players: usize, values: DVector<f64>) -> Result<Self> {
        if values.len() < players {
            return Err(Error::Dimension {
                what: "control vector",
                got: values.len(),
                expected: players,
            });
        }
        check_finite("control vector", values.as_slice())?;
        Ok(ControlVector { players, values })
    }

    pub fn from_parts(a: &DVector<f64>, s: &DVector<f64>) -> Self {
        let mut values = DVector::zeros(a.len() + s.len());
        values.rows_mut(0, a.len()).copy_from(a);
        values.rows_mut(a.len(), s.len()).copy_from(s);
        ControlVector {
            players: a.len(),
            values,
        }
    }

    pub fn players(&self) -> usize {
        self.players
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn allocation(&self) -> DVector<f64> {
        self.values.rows(0, self.players).into_owned()
    }

    pub fn surplus(&self) -> DVector<f64> {
        self.values
            .rows(self.players, self.values.len() - self.players)
            .into_owned()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The feasible control set `U` as a hyperbox: allocations within
/// [`AllocationBounds`], surpluses in `[0, surplus_cap]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeasibleSet {
    players: usize,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl FeasibleSet {
    /// `surplus_cap` may be `f64::INFINITY` for the plain `s >= 0` set.
    pub fn new(index: &CoalitionIndex, bounds: &AllocationBounds, surplus_cap: f64) -> Result<Self> {
        let n = index.players();
        check_len("a_min", bounds.a_min.len(), n)?;
        if surplus_cap.is_nan() || surplus_cap < 0.0 {
            return Err(Error::Domain(format!(
                "surplus cap must be non-negative, got {surplus_cap}"
            )));
        }
        let dim = index.control_dim();
        let mut lower = DVector::zeros(dim);
        let mut upper = DVector::from_element(dim, surplus_cap);
        lower.rows_mut(0, n).copy_from(&bounds.a_min);
        upper.rows_mut(0, n).copy_from(&bounds.a_max);
        Ok(FeasibleSet {
            players: n,
            lower,
            upper,
        })
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    /// Largest componentwise distance of `u` outside the box.
    pub fn violation(&self, u: &ControlVector) -> f64 {
        u.values()
            .iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .map(|(&x, (&lo, &hi))| (lo - x).max(x - hi).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn contains(&self, u: &ControlVector, tol: f64) -> bool {
        u.len() == self.lower.len() && self.violation(u) <= tol
    }

    /// Componentwise projection onto the box.
    pub fn clamp(&self, u: &DVector<f64>) -> ControlVector {
        let values = DVector::from_iterator(
            u.len(),
            u.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(&x, (&lo, &hi))| x.clamp(lo, hi)),
        );
        ControlVector {
            players: self.players,
            values,
        }
    }
}

/// Integrated extra reward per coalition.
#[derive(Clone, Debug, PartialEq)]
pub struct ExcessState {
    pub epsilon: DVector<f64>,
    pub epsilon0: DVector<f64>,
}

impl ExcessState {
    pub fn new(epsilon0: DVector<f64>) -> Self {
        ExcessState {
            epsilon: epsilon0.clone(),
            epsilon0,
        }
    }

    /// One explicit-Euler step of `d eps / dt = B_H a - v`.
    pub fn update(
        &self,
        index: &CoalitionIndex,
        a: &DVector<f64>,
        v: &GameVector,
        dt: f64,
    ) -> Result<ExcessState> {
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("dt must be positive, got {dt}")));
        }
        index.check_allocation(a)?;
        index.check_game(v)?;
        check_finite("allocation", a.as_slice())?;
        let rate = index.coalition_sums(a) - v.values();
        let epsilon = &self.epsilon + rate * dt;
        check_finite("excess", epsilon.as_slice())?;
        Ok(ExcessState {
            epsilon,
            epsilon0: self.epsilon0.clone(),
        })
    }
}

/// Core residual: `max(|sum a - v_N|, max_S (v_S - sum_{i in S} a_i)^+)`.
pub fn core_violation(index: &CoalitionIndex, v: &GameVector, a: &DVector<f64>) -> f64 {
    let sums = index.coalition_sums(a);
    let m = index.len();
    let efficiency = (sums[m - 1] - v.grand()).abs();
    (0..m - 1)
        .map(|j| (v.values()[j] - sums[j]).max(0.0))
        .fold(efficiency, f64::max)
}

pub fn core_membership(index: &CoalitionIndex, v: &GameVector, a: &DVector<f64>, tol: f64) -> bool {
    core_violation(index, v, a) <= tol
}

/// Minimum of `sum a` subject to `sum_{i in S} a_i >= v_S` for every proper
/// coalition, together with a minimiser. `None` for a single player, where
/// there are no proper coalitions.
fn min_rational_budget(index: &CoalitionIndex, v: &GameVector) -> Result<Option<(f64, DVector<f64>)>> {
    let n = index.players();
    if n == 1 {
        return Ok(None);
    }
    let mut problem = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = (0..n)
        .map(|_| problem.add_var(1.0, (f64::NEG_INFINITY, f64::INFINITY)))
        .collect();
    for (j, c) in index.coalitions()[..index.len() - 1].iter().enumerate() {
        let terms: Vec<_> = c.members().map(|i| (vars[i], 1.0)).collect();
        problem.add_constraint(terms.as_slice(), ComparisonOp::Ge, v.values()[j]);
    }
    let outcome = problem
        .solve()
        .map_err(|e| Error::Solver(e.to_string()))?;
    let solution = outcome
        .into_solution()
        .map_err(|e| Error::Solver(format!("interrupted: {:?}", e.termination_reason())))?;
    let a = DVector::from_iterator(n, vars.iter().map(|&x| solution.var_value(x)));
    Ok(Some((solution.objective(), a)))
}

/// Whether the core of `v` is nonempty.
///
/// Minimises the budget needed to satisfy every proper coalition; the core
/// is nonempty iff that budget does not exceed `v_N`.
pub fn is_balanced(index: &CoalitionIndex, v: &GameVector) -> Result<bool> {
    Ok(core_point(index, v)?.is_some())
}

/// A point of the core, when one exists.
pub fn core_point(index: &CoalitionIndex, v: &GameVector) -> Result<Option<DVector<f64>>> {
    index.check_game(v)?;
    let n = index.players();
    let Some((budget, mut a)) = min_rational_budget(index, v)? else {
        return Ok(Some(DVector::from_element(1, v.grand())));
    };
    let slack = v.grand() - budget;
    if slack < -BALANCE_TOL * v.grand().abs().max(1.0) {
        return Ok(None);
    }
    a.add_scalar_mut(slack / n as f64);
    let residual = core_violation(index, v, &a);
    if residual > 1e-6 * v.values().amax().max(1.0) {
        return Err(Error::Solver(format!(
            "recovered core point has residual {residual:e}"
        )));
    }
    Ok(Some(a))
}
