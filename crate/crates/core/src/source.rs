//! Processes that generate instantaneous games `v(t)`.
//!
//! The main source is a finite-support distribution whose mean equals the
//! nominal game. Its support is found by rejection: draw `m` random points,
//! solve for weights that reproduce the mean, keep the draw only if the
//! weights form a probability vector and the rescaled points stay inside the
//! value box.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore};

use crate::coalition::{CoalitionIndex, GameVector};
use crate::error::{check_finite, check_len, Error, Result};

/// Residual tolerance for `R p = v_nom`.
pub const SUPPORT_TOL: f64 = 1e-9;

/// Default cap on rejection attempts.
pub const DEFAULT_MAX_TRIES: usize = 100_000;

/// Anything that can produce i.i.d. instantaneous games.
pub trait GameSource: Sync {
    fn sample(&self, rng: &mut dyn RngCore) -> GameVector;
}

/// Per-coalition value intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct GameBox {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl GameBox {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        check_len("box upper bound", upper.len(), lower.len())?;
        check_finite("box lower bound", lower.as_slice())?;
        check_finite("box upper bound", upper.as_slice())?;
        if let Some(i) = (0..lower.len()).find(|&i| lower[i] > upper[i]) {
            return Err(Error::Domain(format!(
                "box coordinate {i}: lower {} exceeds upper {}",
                lower[i], upper[i]
            )));
        }
        Ok(GameBox { lower, upper })
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        v.len() == self.dim()
            && (0..v.len()).all(|i| v[i] >= self.lower[i] - tol && v[i] <= self.upper[i] + tol)
    }

    /// Largest sub-box centred at `center` that fits inside this box.
    pub fn centered_at(&self, center: &DVector<f64>) -> Result<GameBox> {
        check_len("box centre", center.len(), self.dim())?;
        if !self.contains(center, 0.0) {
            return Err(Error::Domain("centre lies outside the value box".into()));
        }
        let half = DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|i| (center[i] - self.lower[i]).min(self.upper[i] - center[i])),
        );
        GameBox::new(center - &half, center + &half)
    }

    fn sample_uniform(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|i| {
                let (lo, hi) = (self.lower[i], self.upper[i]);
                if lo == hi {
                    lo
                } else {
                    lo + (hi - lo) * rng.random::<f64>()
                }
            }),
        )
    }
}

/// Distribution used to draw candidate support points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SupportSampling {
    /// Uniform over the whole value box.
    Uniform,
    /// Uniform over the largest sub-box centred at the nominal game.
    #[default]
    Centered,
}

/// Draws column `r_i` with probability `p_i`.
#[derive(Clone, Debug)]
pub struct FiniteSupportProcess {
    support: DMatrix<f64>,
    probabilities: DVector<f64>,
    picker: WeightedIndex<f64>,
}

impl FiniteSupportProcess {
    pub fn new(support: DMatrix<f64>, probabilities: DVector<f64>) -> Result<Self> {
        check_len("probability vector", probabilities.len(), support.ncols())?;
        check_finite("support", support.as_slice())?;
        if probabilities.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Domain("probabilities must be non-negative".into()));
        }
        let total: f64 = probabilities.sum();
        if (total - 1.0).abs() > SUPPORT_TOL {
            return Err(Error::Domain(format!("probabilities sum to {total}, not 1")));
        }
        let picker = WeightedIndex::new(probabilities.iter().copied())
            .map_err(|e| Error::Domain(format!("invalid weights: {e}")))?;
        Ok(FiniteSupportProcess {
            support,
            probabilities,
            picker,
        })
    }

    pub fn support(&self) -> &DMatrix<f64> {
        &self.support
    }

    pub fn probabilities(&self) -> &DVector<f64> {
        &self.probabilities
    }

    pub fn mean(&self) -> DVector<f64> {
        &self.support * &self.probabilities
    }

    pub fn draw_index(&self, rng: &mut dyn RngCore) -> usize {
        self.picker.sample(rng)
    }
}

impl GameSource for FiniteSupportProcess {
    fn sample(&self, rng: &mut dyn RngCore) -> GameVector {
        let i = self.draw_index(rng);
        GameVector::new(self.support.column(i).into_owned()).expect("support is finite")
    }
}

/// A successfully generated support and the number of draws it took.
#[derive(Clone, Debug)]
pub struct GeneratedSupport {
    pub process: FiniteSupportProcess,
    pub attempts: usize,
}

/// Rejection sampler for a finite-support process with mean `v_nom` and
/// every support point inside `value_box`.
pub fn generate_support(
    value_box: &GameBox,
    v_nom: &GameVector,
    sampling: SupportSampling,
    rng: &mut dyn RngCore,
    max_tries: usize,
) -> Result<GeneratedSupport> {
    let m = value_box.dim();
    check_len("nominal game", v_nom.len(), m)?;
    if m == 0 {
        return Err(Error::Domain("empty value box".into()));
    }
    let target = v_nom.values();
    if !value_box.contains(target, 0.0) {
        return Err(Error::Generation {
            attempts: 0,
            reason: "nominal game lies outside the value box".into(),
        });
    }
    let draw_box = match sampling {
        SupportSampling::Uniform => value_box.clone(),
        SupportSampling::Centered => {
            let b = value_box.centered_at(target)?;
            let pinned: Vec<usize> = (0..m).filter(|&i| b.lower[i] == b.upper[i]).collect();
            // Constant rows make R singular unless there is one, nonzero.
            if pinned.len() > 1 || pinned.iter().any(|&i| target[i] == 0.0) && m > 1 {
                return Err(Error::Generation {
                    attempts: 0,
                    reason: format!(
                        "nominal game touches the box boundary in coordinates {pinned:?}; \
                         every support draw is singular"
                    ),
                });
            }
            b
        }
    };

    for attempt in 1..=max_tries {
        let mut r = DMatrix::zeros(m, m);
        for j in 0..m {
            r.set_column(j, &draw_box.sample_uniform(rng));
        }
        if let Some(process) = accept_draw(value_box, target, r) {
            return Ok(GeneratedSupport {
                process,
                attempts: attempt,
            });
        }
    }
    Err(Error::Generation {
        attempts: max_tries,
        reason: "no draw produced a probability vector with in-box support".into(),
    })
}

/// Steps 2-5 of the rejection loop for one candidate matrix.
fn accept_draw(value_box: &GameBox, target: &DVector<f64>, mut r: DMatrix<f64>) -> Option<FiniteSupportProcess> {
    let p = r.clone().lu().solve(target)?;
    if !p.iter().all(|x| x.is_finite()) || (&r * &p - target).amax() > SUPPORT_TOL {
        return None;
    }
    let total: f64 = p.sum();
    if p.iter().any(|&x| x < 0.0) || !(total > 0.0) {
        return None;
    }
    r *= total;
    let p = p / total;

    let scale = value_box.upper.amax().max(value_box.lower.amax()).max(1.0);
    let snap = 1e-12 * scale;
    for j in 0..r.ncols() {
        for i in 0..r.nrows() {
            let (lo, hi) = (value_box.lower[i], value_box.upper[i]);
            let x = r[(i, j)];
            if x < lo - snap || x > hi + snap {
                return None;
            }
            r[(i, j)] = x.clamp(lo, hi);
        }
    }
    if (&r * &p - target).amax() > SUPPORT_TOL {
        return None;
    }
    FiniteSupportProcess::new(r, p).ok()
}

/// Always returns the same game.
#[derive(Clone, Debug)]
pub struct ConstantSource(pub GameVector);

impl GameSource for ConstantSource {
    fn sample(&self, _rng: &mut dyn RngCore) -> GameVector {
        self.0.clone()
    }
}

/// Wraps a source and adds a fixed offset to every sample.
#[derive(Clone, Debug)]
pub struct ShiftedSource<S> {
    pub inner: S,
    pub shift: DVector<f64>,
}

impl<S: GameSource> GameSource for ShiftedSource<S> {
    fn sample(&self, rng: &mut dyn RngCore) -> GameVector {
        let v = self.inner.sample(rng).into_inner() + &self.shift;
        GameVector::new(v).expect("shifted sample is finite")
    }
}

/// Joint-replenishment game: retailers share a transport cost `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct SupplyChainGame {
    transport_cost: f64,
    d_min: DVector<f64>,
    d_max: DVector<f64>,
}

impl SupplyChainGame {
    pub fn new(transport_cost: f64, d_min: DVector<f64>, d_max: DVector<f64>) -> Result<Self> {
        check_len("d_max", d_max.len(), d_min.len())?;
        if !(transport_cost > 0.0) || !transport_cost.is_finite() {
            return Err(Error::Domain(format!(
                "transport cost must be positive, got {transport_cost}"
            )));
        }
        check_finite("d_min", d_min.as_slice())?;
        check_finite("d_max", d_max.as_slice())?;
        if let Some(i) = (0..d_min.len()).find(|&i| d_min[i] < 0.0 || d_min[i] > d_max[i]) {
            return Err(Error::Domain(format!(
                "retailer {}: need 0 <= d_min <= d_max, got [{}, {}]",
                i + 1,
                d_min[i],
                d_max[i]
            )));
        }
        Ok(SupplyChainGame {
            transport_cost,
            d_min,
            d_max,
        })
    }

    pub fn retailers(&self) -> usize {
        self.d_min.len()
    }

    /// Cost savings `v_S = sum_{i in S} min(K, d_i) - min(K, sum_{i in S} d_i)`.
    pub fn values(&self, index: &CoalitionIndex, demand: &DVector<f64>) -> Result<GameVector> {
        check_len("retailer count", index.players(), self.retailers())?;
        check_len("demand", demand.len(), self.retailers())?;
        if let Some(i) = (0..demand.len()).find(|&i| !(demand[i] >= self.d_min[i] && demand[i] <= self.d_max[i])) {
            return Err(Error::Domain(format!(
                "demand of retailer {} = {} outside [{}, {}]",
                i + 1,
                demand[i],
                self.d_min[i],
                self.d_max[i]
            )));
        }
        let k = self.transport_cost;
        let values = index.coalitions().iter().map(|c| {
            let solo: f64 = c.members().map(|i| demand[i].min(k)).sum();
            let joint = c.members().map(|i| demand[i]).sum::<f64>().min(k);
            solo - joint
        });
        GameVector::new(DVector::from_iterator(index.len(), values))
    }

    /// Value box `[0, sum_{i in S} min(K, d_i^max) - min(K, sum_{i in S} d_i^min)]`.
    pub fn bounds(&self, index: &CoalitionIndex) -> Result<GameBox> {
        check_len("retailer count", index.players(), self.retailers())?;
        let k = self.transport_cost;
        let upper = index.coalitions().iter().map(|c| {
            let solo: f64 = c.members().map(|i| self.d_max[i].min(k)).sum();
            let joint = c.members().map(|i| self.d_min[i]).sum::<f64>().min(k);
            solo - joint
        });
        GameBox::new(
            DVector::zeros(index.len()),
            DVector::from_iterator(index.len(), upper),
        )
    }

    /// Draws demands uniformly in `[d_min, d_max]`.
    pub fn sample_demand(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        DVector::from_iterator(
            self.retailers(),
            (0..self.retailers()).map(|i| {
                let (lo, hi) = (self.d_min[i], self.d_max[i]);
                if lo == hi {
                    lo
                } else {
                    rng.random_range(lo..=hi)
                }
            }),
        )
    }
}

/// Supply-chain game driven by uniformly distributed demands.
#[derive(Clone, Debug)]
pub struct SupplyChainSource {
    pub game: SupplyChainGame,
    pub index: CoalitionIndex,
}

impl GameSource for SupplyChainSource {
    fn sample(&self, rng: &mut dyn RngCore) -> GameVector {
        let d = self.game.sample_demand(rng);
        self.game
            .values(&self.index, &d)
            .expect("sampled demand is within bounds")
    }
}
