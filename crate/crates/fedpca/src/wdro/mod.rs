//! Desk-scale Wasserstein-DRO laboratory on finite sample spaces.
//!
//! Finiteness turns every sup/inf of the robust-loss machinery into a
//! max/min, which makes the bounds machine-checkable:
//!
//! * `phi_gamma(z) = max_zeta { loss(zeta) - gamma * d(zeta, z) }` is the
//!   robust surrogate of a loss at one sample point;
//! * `robust_loss = E_P[phi_gamma] + gamma * rho` upper-bounds the worst
//!   expected loss over the 1-Wasserstein ball of radius `rho` around `P`,
//!   for every `gamma >= 0`, with equality at the best `gamma`;
//! * [`ball_sup`] is the independent primal oracle: it walks distributions
//!   on a simplex grid (resolution `1/m` per mass unit), keeps those whose
//!   exact transport distance to the center stays within `rho`, and
//!   maximizes the expected loss over them — a lower bound on the true sup
//!   that tightens as `m` grows.
//!
//! [`check_duality`], [`check_sandwich`] and [`check_excess_risk_transfer`]
//! assert the two routes against each other and the sandwich/transfer
//! inequalities over every generated ball member, with tolerances that
//! account for the mass-grid resolution.
//!
//! Scale caps are deliberate: at most 6 sample points and a mass grid of at
//! most 200, with the enumeration budget guarded, since the grid search is
//! exponential in the point count.

mod transport;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;

pub use transport::{composition_count, for_each_composition, LipschitzDual};

/// Hard cap on the number of sample points.
pub const MAX_POINTS: usize = 6;
/// Hard cap on the mass-grid resolution.
pub const MAX_MASS_GRID: usize = 200;
/// Hard cap on the number of grid distributions one call may enumerate.
pub const MAX_ENUMERATION: u128 = 25_000_000;

/// A finite sample space: points plus a validated pairwise distance table.
#[derive(Debug, Clone)]
pub struct FiniteSpace {
    points: Vec<Vec<f64>>,
    metric: Mat,
    dual: LipschitzDual,
}

impl FiniteSpace {
    /// Validate symmetry, zero diagonal, nonnegativity and the triangle
    /// inequality, then precompute the transport dual.
    pub fn new(points: Vec<Vec<f64>>, metric: Mat) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::Config("sample space needs at least one point".into()));
        }
        if n > MAX_POINTS {
            return Err(Error::Config(format!(
                "the finite-space lab caps |Z| at {MAX_POINTS}, got {n}"
            )));
        }
        if metric.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "metric is {:?}, expected {n}x{n}",
                metric.shape()
            )));
        }
        let scale = metric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
        let tol = 1e-9 * scale;
        for i in 0..n {
            if metric[(i, i)].abs() > tol {
                return Err(Error::Config(format!("metric diagonal entry ({i},{i}) is not zero")));
            }
            for j in 0..n {
                let dij = metric[(i, j)];
                if !dij.is_finite() || dij < 0.0 {
                    return Err(Error::Config(format!("metric entry ({i},{j}) = {dij} is invalid")));
                }
                if (dij - metric[(j, i)]).abs() > tol {
                    return Err(Error::Config(format!("metric is not symmetric at ({i},{j})")));
                }
                for k in 0..n {
                    if dij > metric[(i, k)] + metric[(k, j)] + tol {
                        return Err(Error::Config(format!(
                            "triangle inequality fails: d({i},{j}) > d({i},{k}) + d({k},{j})"
                        )));
                    }
                }
            }
        }
        let dual = LipschitzDual::new(&metric);
        Ok(Self { points, metric, dual })
    }

    /// Build the metric from Euclidean distances between the points.
    pub fn euclidean(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::Config("sample space needs at least one point".into()));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::Dimension("points have mixed dimensions".into()));
        }
        let metric = Mat::from_fn(n, n, |i, j| {
            points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        });
        Self::new(points, metric)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn metric(&self) -> &Mat {
        &self.metric
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.metric[(i, j)]
    }

    pub fn diameter(&self) -> f64 {
        self.metric.iter().fold(0.0f64, |m, v| m.max(*v))
    }

    /// Smallest strictly positive pairwise distance.
    pub fn min_positive_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.len() {
            for j in 0..self.len() {
                let d = self.metric[(i, j)];
                if d > 0.0 && d < best {
                    best = d;
                }
            }
        }
        best
    }

    /// Exact `W1` between two weight vectors over this space.
    pub fn wasserstein1(&self, a: &DiscreteDistribution, b: &DiscreteDistribution) -> Result<f64> {
        if a.len() != self.len() || b.len() != self.len() {
            return Err(Error::Dimension("distribution does not match the space".into()));
        }
        Ok(self.dual.wasserstein1(a.weights(), b.weights()))
    }
}

/// Probability weights over the points of a [`FiniteSpace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    weights: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("distribution needs at least one weight".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("distribution weights must be finite and nonnegative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("distribution weights sum to {sum}, not 1")));
        }
        Ok(Self { weights })
    }

    pub fn point_mass(n: usize, at: usize) -> Result<Self> {
        if at >= n {
            return Err(Error::Config(format!("point mass index {at} out of range {n}")));
        }
        let mut weights = vec![0.0; n];
        weights[at] = 1.0;
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `E[values]` under this distribution.
    pub fn expectation(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// A loss fixed at one hypothesis: per-point values plus the certified
/// Lipschitz constant and uniform bound, both checked on construction.
#[derive(Debug, Clone)]
pub struct LossTable {
    values: Vec<f64>,
    lipschitz: f64,
    bound: f64,
}

impl LossTable {
    pub fn new(space: &FiniteSpace, values: Vec<f64>, lipschitz: f64, bound: f64) -> Result<Self> {
        if values.len() != space.len() {
            return Err(Error::Dimension(format!(
                "{} loss values for {} points",
                values.len(),
                space.len()
            )));
        }
        if !(lipschitz >= 0.0) || !(bound >= 0.0) {
            return Err(Error::Config("lipschitz and bound certificates must be nonnegative".into()));
        }
        let slack = 1e-9 * bound.max(1.0);
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() || v.abs() > bound + slack {
                return Err(Error::Config(format!(
                    "loss value {v} at point {i} breaks the bound {bound}"
                )));
            }
            for (j, w) in values.iter().enumerate() {
                let gap = (v - w).abs();
                let d = space.distance(i, j);
                if gap > lipschitz * d + slack {
                    return Err(Error::Config(format!(
                        "Lipschitz certificate fails between points {i} and {j}: |{v} - {w}| > {lipschitz} * {d}"
                    )));
                }
            }
        }
        Ok(Self { values, lipschitz, bound })
    }

    /// The tight Lipschitz constant of values over a space.
    pub fn tight_lipschitz(space: &FiniteSpace, values: &[f64]) -> f64 {
        let mut best = 0.0f64;
        for i in 0..values.len() {
            for j in 0..values.len() {
                let d = space.distance(i, j);
                if d > 0.0 {
                    best = best.max((values[i] - values[j]).abs() / d);
                }
            }
        }
        best
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }
}

/// Robust surrogate at point `z`: `max_zeta { loss(zeta) - gamma * d(zeta, z) }`.
/// Always at least `loss(z)` and non-increasing in `gamma`.
pub fn phi_gamma(space: &FiniteSpace, loss: &LossTable, gamma: f64, z: usize) -> f64 {
    assert!(gamma >= 0.0, "phi_gamma needs gamma >= 0");
    assert!(z < space.len());
    let mut best = f64::NEG_INFINITY;
    for (zeta, v) in loss.values().iter().enumerate() {
        let candidate = v - gamma * space.distance(zeta, z);
        if candidate > best {
            best = candidate;
        }
    }
    best
}

/// Dual robust loss `E_dist[phi_gamma] + gamma * rho`; an upper bound on the
/// worst expected loss over the radius-`rho` ball for every `gamma >= 0`.
pub fn robust_loss(
    space: &FiniteSpace,
    loss: &LossTable,
    dist: &DiscreteDistribution,
    gamma: f64,
    rho: f64,
) -> f64 {
    assert!(rho >= 0.0, "robust_loss needs rho >= 0");
    let mut total = 0.0;
    for (z, w) in dist.weights().iter().enumerate() {
        if *w > 0.0 {
            total += w * phi_gamma(space, loss, gamma, z);
        }
    }
    total + gamma * rho
}

/// Gamma grid that makes the dual minimization exact: zero, every kink of
/// `gamma -> E[phi_gamma]` (where the inner argmax switches between two
/// points), and `gamma_max = 2 * bound / min positive distance`, beyond
/// which transport never pays.
pub fn recommended_gamma_grid(space: &FiniteSpace, loss: &LossTable) -> Vec<f64> {
    let min_d = space.min_positive_distance();
    let gamma_max = if min_d.is_finite() {
        2.0 * loss.bound().max(1e-12) / min_d
    } else {
        1.0
    };
    let mut grid = vec![0.0, gamma_max];
    let n = space.len();
    for z in 0..n {
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let denom = space.distance(a, z) - space.distance(b, z);
                if denom.abs() < 1e-15 {
                    continue;
                }
                let g = (loss.values()[a] - loss.values()[b]) / denom;
                if g > 0.0 && g.is_finite() && g <= gamma_max * 1.000001 {
                    grid.push(g);
                }
            }
        }
    }
    grid.sort_by(|a, b| a.total_cmp(b));
    grid.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
    grid
}

/// Minimize the dual robust loss over a gamma grid; returns
/// `(gamma_star, value)`, taking the first grid minimizer.
pub fn minimize_robust_loss(
    space: &FiniteSpace,
    loss: &LossTable,
    dist: &DiscreteDistribution,
    gamma_grid: &[f64],
    rho: f64,
) -> Result<(f64, f64)> {
    if gamma_grid.is_empty() {
        return Err(Error::Config("gamma grid is empty".into()));
    }
    let mut best = (gamma_grid[0], f64::INFINITY);
    for &g in gamma_grid {
        if !(g >= 0.0) {
            return Err(Error::Config(format!("gamma grid entry {g} is negative")));
        }
        let v = robust_loss(space, loss, dist, g, rho);
        if v < best.1 {
            best = (g, v);
        }
    }
    Ok(best)
}

fn validate_grid_call(space: &FiniteSpace, center: &DiscreteDistribution, rho: f64, m: usize) -> Result<()> {
    if center.len() != space.len() {
        return Err(Error::Dimension("center does not match the space".into()));
    }
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::Config(format!("rho must be nonnegative, got {rho}")));
    }
    if m < 10 {
        return Err(Error::Config(format!("mass grid m = {m} is too coarse (need m >= 10)")));
    }
    if m > MAX_MASS_GRID {
        return Err(Error::Config(format!("mass grid m = {m} exceeds the cap {MAX_MASS_GRID}")));
    }
    match composition_count(m, space.len()) {
        Some(count) if count <= MAX_ENUMERATION => Ok(()),
        _ => Err(Error::Config(format!(
            "enumerating {m}-unit grids over {} points exceeds the budget; lower m",
            space.len()
        ))),
    }
}

/// Visit the center plus every grid distribution (weights in multiples of
/// `1/m`) whose exact transport distance to the center is within `rho`.
pub fn for_each_ball_member(
    space: &FiniteSpace,
    center: &DiscreteDistribution,
    rho: f64,
    m: usize,
    f: &mut impl FnMut(&[f64]),
) -> Result<()> {
    validate_grid_call(space, center, rho, m)?;
    f(center.weights());
    let slack = 1e-12 * space.diameter().max(1.0);
    let mut weights = vec![0.0f64; space.len()];
    for_each_composition(m as u32, space.len(), &mut |counts| {
        for (w, c) in weights.iter_mut().zip(counts) {
            *w = *c as f64 / m as f64;
        }
        if !space.dual.exceeds(&weights, center.weights(), rho + slack) {
            f(&weights);
        }
    });
    Ok(())
}

/// Primal oracle output: the best expected loss found and its witness.
#[derive(Debug, Clone)]
pub struct BallSup {
    pub value: f64,
    pub witness: DiscreteDistribution,
}

/// Brute-force primal oracle: maximize `E_Q[loss]` over the grid members of
/// the ball. The value is a lower bound on the true sup that converges as
/// `m` grows; the witness is always a genuine ball member.
pub fn ball_sup(
    space: &FiniteSpace,
    loss: &LossTable,
    center: &DiscreteDistribution,
    rho: f64,
    m: usize,
) -> Result<BallSup> {
    validate_grid_call(space, center, rho, m)?;
    let mut best_value = center.expectation(loss.values());
    let mut best_weights = center.weights().to_vec();
    let slack = 1e-12 * space.diameter().max(1.0);
    let mut weights = vec![0.0f64; space.len()];
    for_each_composition(m as u32, space.len(), &mut |counts| {
        let mut value = 0.0;
        for (c, v) in counts.iter().zip(loss.values()) {
            value += *c as f64 * v;
        }
        value /= m as f64;
        // Only candidates that improve the incumbent pay for a distance.
        if value <= best_value {
            return;
        }
        for (w, c) in weights.iter_mut().zip(counts) {
            *w = *c as f64 / m as f64;
        }
        if !space.dual.exceeds(&weights, center.weights(), rho + slack) {
            best_value = value;
            best_weights.copy_from_slice(&weights);
        }
    });
    Ok(BallSup {
        value: best_value,
        witness: DiscreteDistribution::new(best_weights)?,
    })
}

/// Exact greedy oracle for two-point spaces: move mass from the cheaper
/// point toward the costlier one at `d` per unit until the budget is spent.
/// With a single possible move this is the linear program's solution.
pub fn ball_sup_two_point(
    space: &FiniteSpace,
    loss: &LossTable,
    center: &DiscreteDistribution,
    rho: f64,
) -> Result<BallSup> {
    if space.len() != 2 {
        return Err(Error::Config(format!(
            "the greedy oracle applies to two-point spaces, got {}",
            space.len()
        )));
    }
    if !(rho >= 0.0) {
        return Err(Error::Config(format!("rho must be nonnegative, got {rho}")));
    }
    let d = space.distance(0, 1);
    let (lo, hi) = if loss.values()[0] <= loss.values()[1] { (0, 1) } else { (1, 0) };
    let gain = loss.values()[hi] - loss.values()[lo];
    let mut weights = center.weights().to_vec();
    if d > 0.0 && gain > 0.0 {
        let moved = weights[lo].min(rho / d);
        weights[lo] -= moved;
        weights[hi] += moved;
    }
    let witness = DiscreteDistribution::new(weights)?;
    Ok(BallSup {
        value: witness.expectation(loss.values()),
        witness,
    })
}

/// Knobs shared by the three checks.
#[derive(Debug, Clone)]
pub struct CheckOptions {
    /// Mass-grid resolution for the primal enumeration.
    pub mass_grid: usize,
    /// Slack allowed by the inequalities. `None` derives a budget from the
    /// loss bound and the mass-grid resolution
    /// (`1e-2 * bound + 2 * bound * |Z| / m`); pass an explicit value when
    /// using coarse custom gamma grids.
    pub tolerance: Option<f64>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            mass_grid: 100,
            tolerance: None,
        }
    }
}

impl CheckOptions {
    fn resolve_tolerance(&self, space: &FiniteSpace, bound: f64) -> f64 {
        self.tolerance
            .unwrap_or_else(|| 1e-2 * bound + 2.0 * bound * space.len() as f64 / self.mass_grid as f64)
    }
}

#[derive(Debug, Clone)]
pub struct DualityReport {
    pub primal: f64,
    pub dual: f64,
    pub gamma_star: f64,
    pub gap: f64,
    pub tolerance: f64,
    pub witness: DiscreteDistribution,
}

/// Assert weak duality (`ball_sup <= min_gamma robust_loss`) and that the
/// gap at the grid-minimizing gamma stays within tolerance.
pub fn check_duality(
    space: &FiniteSpace,
    loss: &LossTable,
    center: &DiscreteDistribution,
    rho: f64,
    gamma_grid: &[f64],
    opts: &CheckOptions,
) -> Result<DualityReport> {
    let primal = ball_sup(space, loss, center, rho, opts.mass_grid)?;
    let (gamma_star, dual) = minimize_robust_loss(space, loss, center, gamma_grid, rho)?;
    let float_slack = 1e-9 * (1.0 + loss.bound());
    if primal.value > dual + float_slack {
        return Err(Error::CheckFailed(format!(
            "weak duality violated: primal {} > dual {} (gamma* = {gamma_star}, rho = {rho}, witness = {:?})",
            primal.value,
            dual,
            primal.witness.weights()
        )));
    }
    let tolerance = opts.resolve_tolerance(space, loss.bound());
    let gap = dual - primal.value;
    if gap > tolerance {
        return Err(Error::CheckFailed(format!(
            "duality gap {gap} exceeds tolerance {tolerance} (primal {}, dual {}, gamma* {gamma_star}, rho {rho})",
            primal.value, dual
        )));
    }
    Ok(DualityReport {
        primal: primal.value,
        dual,
        gamma_star,
        gap,
        tolerance,
        witness: primal.witness,
    })
}

#[derive(Debug, Clone)]
pub struct SandwichReport {
    pub gamma: f64,
    pub gamma_star: f64,
    pub members: usize,
    /// Largest `E_Q - robust(gamma*)` seen (nonpositive when the lower bound
    /// holds with margin).
    pub max_lower_excess: f64,
    /// Largest `robust(gamma) - upper bound` seen.
    pub max_upper_excess: f64,
    pub tolerance: f64,
}

/// Verify, over every generated ball member `Q`:
/// `E_Q[loss] <= robust(gamma*)` and
/// `robust(gamma) <= E_Q[loss] + (2L + gamma * [gamma != gamma*]) * rho`
/// within the grid tolerance.
pub fn check_sandwich(
    space: &FiniteSpace,
    loss: &LossTable,
    center: &DiscreteDistribution,
    rho: f64,
    gamma: f64,
    gamma_grid: &[f64],
    opts: &CheckOptions,
) -> Result<SandwichReport> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("gamma must be nonnegative, got {gamma}")));
    }
    let (gamma_star, robust_star) = minimize_robust_loss(space, loss, center, gamma_grid, rho)?;
    let robust_at_gamma = robust_loss(space, loss, center, gamma, rho);
    let indicator = if gamma == gamma_star { 0.0 } else { gamma };
    let envelope = (2.0 * loss.lipschitz() + indicator) * rho;
    let tolerance = opts.resolve_tolerance(space, loss.bound());
    let float_slack = 1e-9 * (1.0 + loss.bound());

    let mut members = 0usize;
    let mut max_lower_excess = f64::NEG_INFINITY;
    let mut max_upper_excess = f64::NEG_INFINITY;
    let mut violation: Option<String> = None;
    for_each_ball_member(space, center, rho, opts.mass_grid, &mut |weights| {
        members += 1;
        let eq: f64 = weights.iter().zip(loss.values()).map(|(w, v)| w * v).sum();
        let lower_excess = eq - robust_star;
        let upper_excess = robust_at_gamma - (eq + envelope);
        max_lower_excess = max_lower_excess.max(lower_excess);
        max_upper_excess = max_upper_excess.max(upper_excess);
        if violation.is_none() {
            if lower_excess > float_slack {
                violation = Some(format!(
                    "lower sandwich bound violated: E_Q = {eq} > robust(gamma*) = {robust_star} at Q = {weights:?}"
                ));
            } else if upper_excess > tolerance {
                violation = Some(format!(
                    "upper sandwich bound violated: robust({gamma}) = {robust_at_gamma} > {} at Q = {weights:?}",
                    eq + envelope
                ));
            }
        }
    })?;
    if let Some(message) = violation {
        return Err(Error::CheckFailed(message));
    }
    Ok(SandwichReport {
        gamma,
        gamma_star,
        members,
        max_lower_excess,
        max_upper_excess,
        tolerance,
    })
}

#[derive(Debug, Clone)]
pub struct TransferReport {
    pub members: usize,
    pub comparisons: usize,
    pub max_excess: f64,
    pub tolerance: f64,
}

/// Verify the excess-risk transfer over a finite hypothesis family: for
/// every family member `f'` and every generated ball member `Q`,
/// `excess_Q(f') <= excess_robust(f') + (2L + gamma * [gamma != gamma*]) * rho`
/// where `L` is the family's largest Lipschitz constant and `gamma*` belongs
/// to the family member minimizing `E_Q`.
pub fn check_excess_risk_transfer(
    space: &FiniteSpace,
    family: &[LossTable],
    center: &DiscreteDistribution,
    rho: f64,
    gamma: f64,
    gamma_grid: &[f64],
    opts: &CheckOptions,
) -> Result<TransferReport> {
    if family.is_empty() {
        return Err(Error::Config("the hypothesis family is empty".into()));
    }
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("gamma must be nonnegative, got {gamma}")));
    }
    let max_lipschitz = family.iter().map(LossTable::lipschitz).fold(0.0f64, f64::max);
    let max_bound = family.iter().map(LossTable::bound).fold(0.0f64, f64::max);
    let tolerance = opts.resolve_tolerance(space, max_bound);
    let float_slack = 1e-9 * (1.0 + max_bound);

    // Per family member: robust loss at the given gamma and its own
    // grid-minimizing gamma.
    let mut robust_at_gamma = Vec::with_capacity(family.len());
    let mut gamma_stars = Vec::with_capacity(family.len());
    for loss in family {
        robust_at_gamma.push(robust_loss(space, loss, center, gamma, rho));
        gamma_stars.push(minimize_robust_loss(space, loss, center, gamma_grid, rho)?.0);
    }
    let inf_robust = robust_at_gamma.iter().copied().fold(f64::INFINITY, f64::min);

    let mut members = 0usize;
    let mut comparisons = 0usize;
    let mut max_excess = f64::NEG_INFINITY;
    let mut violation: Option<String> = None;
    for_each_ball_member(space, center, rho, opts.mass_grid, &mut |weights| {
        members += 1;
        let expectations: Vec<f64> = family
            .iter()
            .map(|l| weights.iter().zip(l.values()).map(|(w, v)| w * v).sum())
            .collect();
        let (best_f, inf_expected) = expectations
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, v)| (i, *v))
            .unwrap();
        let indicator = if gamma == gamma_stars[best_f] { 0.0 } else { gamma };
        let envelope = (2.0 * max_lipschitz + indicator) * rho;
        for (fp, eq) in expectations.iter().enumerate() {
            comparisons += 1;
            let lhs = eq - inf_expected;
            let rhs = (robust_at_gamma[fp] - inf_robust) + envelope;
            let excess = lhs - rhs;
            max_excess = max_excess.max(excess);
            if excess > tolerance + float_slack && violation.is_none() {
                violation = Some(format!(
                    "excess-risk transfer violated for family member {fp}: {lhs} > {rhs} at Q = {weights:?}"
                ));
            }
        }
    })?;
    if let Some(message) = violation {
        return Err(Error::CheckFailed(message));
    }
    Ok(TransferReport {
        members,
        comparisons,
        max_excess,
        tolerance,
    })
}

/// A lab instance as stored on disk (JSON). `metric` defaults to Euclidean
/// distances between the points; `lipschitz`/`bound` default to the tight
/// certificates; `gamma` defaults to the duality-check minimizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Instance {
    pub points: Vec<Vec<f64>>,
    #[serde(default)]
    pub metric: Option<Vec<Vec<f64>>>,
    pub losses: Vec<f64>,
    #[serde(default)]
    pub lipschitz: Option<f64>,
    #[serde(default)]
    pub bound: Option<f64>,
    pub weights: Vec<f64>,
    pub rho: f64,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub mass_grid: Option<usize>,
    /// Extra loss tables for the excess-risk transfer check.
    #[serde(default)]
    pub family: Vec<Vec<f64>>,
}

/// An instance compiled into checkable parts.
pub struct BuiltInstance {
    pub space: FiniteSpace,
    pub loss: LossTable,
    pub center: DiscreteDistribution,
    pub rho: f64,
    pub gamma: Option<f64>,
    pub mass_grid: Option<usize>,
    pub family: Vec<LossTable>,
}

impl Instance {
    /// The two-point instance every oracle agrees on: `Z = {0, 1}`,
    /// `loss = (0, 1)`, unit distance, center at 0, `rho = 0.4`.
    pub fn canonical_two_point() -> Self {
        Self {
            points: vec![vec![0.0], vec![1.0]],
            metric: None,
            losses: vec![0.0, 1.0],
            lipschitz: Some(1.0),
            bound: Some(1.0),
            weights: vec![1.0, 0.0],
            rho: 0.4,
            gamma: Some(1.0),
            mass_grid: None,
            family: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Validate and compile the instance. A corrupted metric (asymmetry,
    /// negative entries, broken triangle inequality) is rejected here.
    pub fn build(&self) -> Result<BuiltInstance> {
        let space = match &self.metric {
            Some(rows) => {
                let n = self.points.len();
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Dimension("metric rows do not match the points".into()));
                }
                let mut metric = Mat::zeros(n, n);
                for (i, row) in rows.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        metric[(i, j)] = *v;
                    }
                }
                FiniteSpace::new(self.points.clone(), metric)?
            }
            None => FiniteSpace::euclidean(self.points.clone())?,
        };
        let bound = self
            .bound
            .unwrap_or_else(|| self.losses.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        let lipschitz = self
            .lipschitz
            .unwrap_or_else(|| LossTable::tight_lipschitz(&space, &self.losses) * (1.0 + 1e-12) + 1e-12);
        let loss = LossTable::new(&space, self.losses.clone(), lipschitz, bound)?;
        let center = DiscreteDistribution::new(self.weights.clone())?;
        if center.len() != space.len() {
            return Err(Error::Dimension("weights do not match the points".into()));
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::Config(format!("rho must be nonnegative, got {}", self.rho)));
        }
        if let Some(g) = self.gamma {
            if !(g >= 0.0) || !g.is_finite() {
                return Err(Error::Config(format!("gamma must be nonnegative, got {g}")));
            }
        }
        let mut family = vec![LossTable::new(&space, self.losses.clone(), lipschitz, bound)?];
        for values in &self.family {
            let b = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let l = LossTable::tight_lipschitz(&space, values) * (1.0 + 1e-12) + 1e-12;
            family.push(LossTable::new(&space, values.clone(), l, b)?);
        }
        Ok(BuiltInstance {
            space,
            loss,
            center,
            rho: self.rho,
            gamma: self.gamma,
            mass_grid: self.mass_grid,
            family,
        })
    }

    /// Random instance on 2..=5 separated planar points with soft losses in
    /// `[-1, 1]` and a couple of extra family members.
    pub fn random(rng: &mut impl Rng) -> Self {
        let n = rng.random_range(2..=5usize);
        let mut points: Vec<Vec<f64>> = Vec::with_capacity(n);
        while points.len() < n {
            let cand = vec![rng.random::<f64>(), rng.random::<f64>()];
            let ok = points.iter().all(|p: &Vec<f64>| {
                let d2: f64 = p.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= 0.15
            });
            if ok {
                points.push(cand);
            }
        }
        let losses: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut weights: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().ln()).collect();
        let sum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= sum);
        let rho = rng.random_range(0.0..1.1);
        let n_family = rng.random_range(1..=3usize);
        let family: Vec<Vec<f64>> = (0..n_family)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        Self {
            points,
            metric: None,
            losses,
            lipschitz: None,
            bound: Some(1.0),
            weights,
            rho,
            gamma: None,
            mass_grid: None,
            family,
        }
    }
}
