//! Per-round client/server update rules for the two federated PCA solvers.
//!
//! Both solvers attack the consensus problem
//! `min sum_i ||(I - U U^T) X_i||_F^2  s.t.  U^T U = I` by splitting it into
//! per-client variables `U_i` tied to a server matrix `Z` through dual
//! variables, and alternating local solves, averaging, and dual ascent:
//!
//! * the Euclidean path keeps iterates near the orthonormal set through the
//!   componentwise penalty `h(U) = max{0, U^T U - I}^2` and runs plain
//!   gradient descent with step halving on the augmented local objective;
//! * the manifold path keeps iterates exactly orthonormal by projecting the
//!   gradient of `F_i(U) = f_i(U) + <Y_i, U - Z> + (rho/2) ||U - Z||^2`
//!   onto the tangent space and retracting with a thin QR.
//!
//! Every client caches its Gram matrix `S_i = X_i X_i^T` once, after which
//! the local reconstruction objective
//! `f_i(U) = tr(S) - 2 tr(U^T S U) + tr((U^T S U)(U^T U))` and its gradient
//! cost only `O(d^2 k)` per evaluation, independent of the local record
//! count. The trace form is exact for arbitrary (not necessarily
//! orthonormal) `U`, which the Euclidean path needs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grassmann::{project_to_tangent, GrassmannPoint};
use crate::numerics::{frobenius_inner, frobenius_norm_sq, Mat};

/// Which local update rule a federation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedPe,
    FedPg,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Algorithm::FedPe => write!(f, "fedpe"),
            Algorithm::FedPg => write!(f, "fedpg"),
        }
    }
}

/// Hyperparameters shared by both solvers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    /// ADMM penalty / dual step size.
    pub rho: f64,
    /// Local gradient step size.
    pub eta: f64,
    /// Local iterations per global round (C).
    pub local_rounds: usize,
    /// Global rounds (T).
    pub global_rounds: usize,
    /// Fraction of clients sampled per round, in (0, 1].
    pub sample_fraction: f64,
    /// Subspace rank.
    pub k: usize,
    pub algorithm: Algorithm,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            eta: 1e-3,
            local_rounds: 30,
            global_rounds: 1000,
            sample_fraction: 0.1,
            k: 30,
            algorithm: Algorithm::FedPg,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, n_clients: usize) -> Result<()> {
        if n_clients == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "sample_fraction must be in (0, 1], got {}",
                self.sample_fraction
            )));
        }
        if self.sampled_count(n_clients) == 0 {
            return Err(Error::Config(
                "sample_fraction * clients rounds to zero participants".into(),
            ));
        }
        Ok(())
    }

    /// `ceil(sample_fraction * n)`, capped at n.
    pub fn sampled_count(&self, n_clients: usize) -> usize {
        ((self.sample_fraction * n_clients as f64).ceil() as usize).min(n_clients)
    }
}

/// One gateway's federation state: primal `U_i`, duals `Y_i` (consensus) and
/// `T_i` (orthogonality), plus the cached Gram matrix of its local data.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub u: Mat,
    pub y: Mat,
    pub t: Mat,
    gram: Mat,
    trace_gram: f64,
    pub n_records: usize,
}

impl ClientState {
    /// Build a client from its local `d x n_i` data matrix and an initial
    /// basis; caches `S_i = X_i X_i^T` (symmetrized) once.
    pub fn new(id: usize, data: &Mat, u0: Mat) -> Result<Self> {
        let (d, n) = data.shape();
        let (ud, k) = u0.shape();
        if ud != d || k == 0 || k >= d {
            return Err(Error::Dimension(format!(
                "client {id}: initial basis {ud}x{k} does not fit {d}-dimensional data (need k < d)"
            )));
        }
        let gram = data * data.transpose();
        let gram = (&gram + gram.transpose()) * 0.5;
        let trace_gram = gram.trace();
        Ok(Self {
            id,
            u: u0,
            y: Mat::zeros(d, k),
            t: Mat::zeros(k, k),
            gram,
            trace_gram,
            n_records: n,
        })
    }

    /// Rebuild a client from checkpointed state; the Gram trace is derived
    /// from the stored matrix.
    pub fn restore(id: usize, u: Mat, y: Mat, t: Mat, gram: Mat, n_records: usize) -> Self {
        let trace_gram = gram.trace();
        Self {
            id,
            u,
            y,
            t,
            gram,
            trace_gram,
            n_records,
        }
    }

    pub fn gram(&self) -> &Mat {
        &self.gram
    }

    /// Local reconstruction objective `f_i(u)` through the Gram cache,
    /// exact for arbitrary `u`.
    pub fn objective(&self, u: &Mat) -> Result<f64> {
        self.check_shape(u)?;
        let su = &self.gram * u;
        let ut_su = u.transpose() * &su;
        let utu = u.transpose() * u;
        // tr(A B) = <A^T, B>_F
        let cross = frobenius_inner(&ut_su.transpose(), &utu)?;
        Ok(self.trace_gram - 2.0 * ut_su.trace() + cross)
    }

    fn check_shape(&self, u: &Mat) -> Result<()> {
        if u.shape() != self.u.shape() {
            return Err(Error::Dimension(format!(
                "client {}: basis shape {:?} does not match state {:?}",
                self.id,
                u.shape(),
                self.u.shape()
            )));
        }
        Ok(())
    }
}

/// Componentwise orthogonality penalty `h(u) = max{0, u^T u - I}^2` (k x k).
pub fn orthogonality_penalty(u: &Mat) -> Mat {
    let k = u.ncols();
    let mut m = u.transpose() * u;
    for i in 0..k {
        m[(i, i)] -= 1.0;
    }
    m.map(|x| {
        let p = x.max(0.0);
        p * p
    })
}

/// Augmented local objective of the Euclidean solver at `u`:
/// `f_i(u) + <Y, u - z> + <T, h(u)> + (rho/2) ||u - z||^2 + (rho/2) ||h(u)||^2`.
pub fn local_objective_fedpe(state: &ClientState, z: &Mat, cfg: &SolverConfig, u: &Mat) -> Result<f64> {
    state.check_shape(u)?;
    state.check_shape(z)?;
    let f = state.objective(u)?;
    let diff = u - z;
    let h = orthogonality_penalty(u);
    Ok(f + frobenius_inner(&state.y, &diff)?
        + frobenius_inner(&state.t, &h)?
        + 0.5 * cfg.rho * frobenius_norm_sq(&diff)
        + 0.5 * cfg.rho * frobenius_norm_sq(&h))
}

/// Gradient of [`local_objective_fedpe`] at a general (not necessarily
/// orthonormal) `u`; validated against central finite differences in the
/// test suite.
///
/// The reconstruction part differentiates the trace form:
/// `grad f = -4 S u + 2 S u (u^T u) + 2 u (u^T S u)`. The penalty terms use
/// `d h = 2 P o dM` with `P = max{0, u^T u - I}` and `M = u^T u - I`, which
/// vanishes at the kink, so the almost-everywhere gradient extends with
/// subgradient zero there.
pub fn fedpe_local_gradient(state: &ClientState, z: &Mat, cfg: &SolverConfig, u: &Mat) -> Result<Mat> {
    state.check_shape(u)?;
    state.check_shape(z)?;
    let su = state.gram() * u;
    let ut_su = u.transpose() * &su;
    let utu = u.transpose() * u;

    let mut g = &su * &utu * 2.0;
    g += u * &ut_su * 2.0;
    g -= &su * 4.0;

    let k = u.ncols();
    let mut m = utu;
    for i in 0..k {
        m[(i, i)] -= 1.0;
    }
    let p = m.map(|x| x.max(0.0));

    // <T, h(u)>: grad = u (W + W^T), W = 2 T o P.
    let w = state.t.component_mul(&p) * 2.0;
    g += u * (&w + w.transpose());

    // (rho/2) ||h(u)||^2: grad = u (V + V^T), V = 2 rho P^3.
    let v = p.map(|x| x * x * x) * (2.0 * cfg.rho);
    g += u * (&v + v.transpose());

    g += &state.y;
    g += (u - z) * cfg.rho;
    Ok(g)
}

const MAX_BACKTRACK: usize = 40;

/// Euclidean local solve: C gradient-descent steps with step size eta and
/// halving backtracking, so the returned objective never exceeds the
/// starting one. Returns the new `U_i` without touching the duals.
pub fn fedpe_local_solve(state: &ClientState, z: &Mat, cfg: &SolverConfig) -> Result<Mat> {
    let mut u = state.u.clone();
    let mut obj = local_objective_fedpe(state, z, cfg, &u)?;
    if !obj.is_finite() {
        return Err(Error::Divergence {
            round: 0,
            message: format!("client {}: non-finite local objective at start", state.id),
        });
    }
    for c in 0..cfg.local_rounds {
        let g = fedpe_local_gradient(state, z, cfg, &u)?;
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                round: c,
                message: format!("client {}: non-finite gradient", state.id),
            });
        }
        let mut step = cfg.eta;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACK {
            let cand = &u - &g * step;
            let cand_obj = local_objective_fedpe(state, z, cfg, &cand)?;
            // A non-finite trial objective is treated like an increase and
            // the step is halved.
            if cand_obj.is_finite() && cand_obj <= obj {
                u = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // Stationary to line-search resolution.
            break;
        }
    }
    Ok(u)
}

/// Manifold local solve: C iterations of tangent-projected gradient steps
/// with QR retraction on `F_i(U) = f_i(U) + <Y, U - Z> + (rho/2)||U - Z||^2`.
/// The Euclidean gradient at an on-manifold point is
/// `G = -2 S u + Y + rho (u - z)`; the in-span components it omits are
/// annihilated by the tangent projection.
pub fn fedpg_local_solve(state: &ClientState, z: &Mat, cfg: &SolverConfig) -> Result<GrassmannPoint> {
    state.check_shape(z)?;
    let mut point = GrassmannPoint::new(state.u.clone())?;
    if cfg.local_rounds == 0 || cfg.eta == 0.0 {
        return Ok(point);
    }
    for c in 0..cfg.local_rounds {
        let g = fedpg_euclidean_gradient(state, z, cfg, point.basis());
        let v = project_to_tangent(&point, &g)?;
        point = crate::grassmann::retract(&point, &v, cfg.eta).map_err(|e| Error::Divergence {
            round: c,
            message: format!("client {}: {e}", state.id),
        })?;
    }
    Ok(point)
}

/// `G = -2 S u + Y + rho (u - z)`, the Euclidean gradient the manifold
/// solver projects; exposed for the finite-difference tests.
pub fn fedpg_euclidean_gradient(state: &ClientState, z: &Mat, cfg: &SolverConfig, u: &Mat) -> Mat {
    (state.gram() * u) * -2.0 + &state.y + (u - z) * cfg.rho
}

/// Value of `F_i(u) = f_i(u) + <Y, u - z> + (rho/2)||u - z||^2`, the
/// objective the manifold solver descends.
pub fn fedpg_local_objective(state: &ClientState, z: &Mat, cfg: &SolverConfig, u: &Mat) -> Result<f64> {
    let diff = u - z;
    Ok(state.objective(u)? + frobenius_inner(&state.y, &diff)? + 0.5 * cfg.rho * frobenius_norm_sq(&diff))
}

/// Mean of the participating clients' new bases, in the given order.
pub fn server_aggregate(updates: &[Mat]) -> Result<Mat> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Config("cannot aggregate an empty client set".into()))?;
    let mut sum = Mat::zeros(first.nrows(), first.ncols());
    for u in updates {
        if u.shape() != first.shape() {
            return Err(Error::Dimension(format!(
                "aggregate: {:?} vs {:?}",
                u.shape(),
                first.shape()
            )));
        }
        sum += u;
    }
    Ok(sum / updates.len() as f64)
}

/// Dual ascent: returns the client with `u` replaced and
/// `y += rho (u+ - z+)`, `t += rho h(u+)`. An orthonormal `u+` leaves `t`
/// unchanged because `h` vanishes there.
pub fn dual_update(state: &ClientState, new_u: &Mat, new_z: &Mat, rho: f64) -> Result<ClientState> {
    state.check_shape(new_u)?;
    state.check_shape(new_z)?;
    let mut next = state.clone();
    next.u = new_u.clone();
    next.y += (new_u - new_z) * rho;
    next.t += orthogonality_penalty(new_u) * rho;
    Ok(next)
}

/// `sum_i f_i(u)` across all clients at one consensus basis, through the
/// Gram caches.
pub fn objective_at(clients: &[ClientState], u: &Mat) -> Result<f64> {
    let mut total = 0.0;
    for c in clients {
        total += c.objective(u)?;
    }
    Ok(total)
}

/// `sum_i f_i(U_i)` at each client's own iterate.
pub fn objective_local(clients: &[ClientState]) -> Result<f64> {
    let mut total = 0.0;
    for c in clients {
        total += c.objective(&c.u)?;
    }
    Ok(total)
}

/// Consensus residual `sum_i ||U_i - z||_F^2`.
pub fn consensus_residual(clients: &[ClientState], z: &Mat) -> f64 {
    clients
        .iter()
        .map(|c| frobenius_norm_sq(&(&c.u - z)))
        .sum()
}

/// One history entry: round index, global objective at the orthonormalized
/// consensus basis, and consensus residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub objective: f64,
    pub consensus_residual: f64,
}

/// Server side of the federation: the consensus matrix plus the round log.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub z: Mat,
    pub round: usize,
    pub history: Vec<RoundRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_client(data: &Mat, u0: Mat) -> ClientState {
        ClientState::new(0, data, u0).unwrap()
    }

    fn orthonormal_2_of_3() -> Mat {
        Mat::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    }

    #[test]
    fn objective_collapses_for_orthonormal_u_at_consensus() {
        let data = Mat::from_row_slice(3, 4, &[1.0, -2.0, 0.5, 0.0, 2.0, 1.0, -1.0, 0.5, 0.0, 3.0, 1.0, -1.0]);
        let u = orthonormal_2_of_3();
        let state = small_client(&data, u.clone());
        let cfg = SolverConfig::default();
        // Y = T = 0 and z = u: every penalty term vanishes, and for
        // orthonormal u the trace form collapses to tr(S) - tr(u^T S u).
        let val = local_objective_fedpe(&state, &u, &cfg, &u).unwrap();
        let su = state.gram() * &u;
        let expected = state.gram().trace() - (u.transpose() * su).trace();
        assert_relative_eq!(val, expected, max_relative = 1e-12);
    }

    #[test]
    fn objective_with_zero_data_is_pure_penalty() {
        let data = Mat::zeros(3, 4);
        let u = Mat::from_row_slice(3, 2, &[0.5, 0.0, 0.0, 2.0, 0.25, 0.0]);
        let state = small_client(&data, u.clone());
        let cfg = SolverConfig {
            rho: 2.0,
            ..SolverConfig::default()
        };
        let z = Mat::zeros(3, 2);
        let h = orthogonality_penalty(&u);
        let expected = 0.5 * cfg.rho * frobenius_norm_sq(&u) + 0.5 * cfg.rho * frobenius_norm_sq(&h);
        assert_relative_eq!(
            local_objective_fedpe(&state, &z, &cfg, &u).unwrap(),
            expected,
            max_relative = 1e-12
        );
    }

    #[test]
    fn penalty_matches_componentwise_definition() {
        // u^T u has (1,1) entry 1.5 -> h_11 = max(0, 0.5)^2 = 0.25.
        let u = Mat::from_row_slice(3, 2, &[1.5f64.sqrt(), 0.0, 0.0, 0.5, 0.0, 0.0]);
        let h = orthogonality_penalty(&u);
        assert_relative_eq!(h[(0, 0)], 0.25, max_relative = 1e-12);
        assert_relative_eq!(h[(1, 1)], 0.0, max_relative = 1e-12);
    }

    #[test]
    fn fedpe_solve_keeps_stationary_point() {
        // Zero data, zero consensus, zero duals: u = 0 has zero gradient.
        let data = Mat::zeros(3, 2);
        let state = small_client(&data, Mat::zeros(3, 2));
        let cfg = SolverConfig::default();
        let z = Mat::zeros(3, 2);
        let out = fedpe_local_solve(&state, &z, &cfg).unwrap();
        assert_eq!(out, Mat::zeros(3, 2));
    }

    #[test]
    fn fedpe_solve_with_zero_local_rounds_is_identity() {
        let data = Mat::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let u0 = orthonormal_2_of_3();
        let state = small_client(&data, u0.clone());
        let cfg = SolverConfig {
            local_rounds: 0,
            ..SolverConfig::default()
        };
        let z = Mat::zeros(3, 2);
        assert_eq!(fedpe_local_solve(&state, &z, &cfg).unwrap(), u0);
    }

    #[test]
    fn fedpg_zero_eta_or_zero_rounds_is_identity() {
        let data = Mat::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let u0 = orthonormal_2_of_3();
        let state = small_client(&data, u0.clone());
        let z = u0.clone();
        for cfg in [
            SolverConfig {
                eta: 0.0,
                ..SolverConfig::default()
            },
            SolverConfig {
                local_rounds: 0,
                ..SolverConfig::default()
            },
        ] {
            let out = fedpg_local_solve(&state, &z, &cfg).unwrap();
            assert_eq!(*out.basis(), u0);
        }
    }

    #[test]
    fn fedpg_fixes_invariant_subspace() {
        // Diagonal S with the dominant axes spanned by u: projected
        // gradient is exactly zero, so the point never moves.
        let data = Mat::from_diagonal(&nalgebra::dvector![3.0, 2.0, 0.5]);
        let u0 = orthonormal_2_of_3();
        let state = small_client(&data, u0.clone());
        let cfg = SolverConfig {
            eta: 0.05,
            local_rounds: 10,
            ..SolverConfig::default()
        };
        let out = fedpg_local_solve(&state, &u0, &cfg).unwrap();
        assert_eq!(*out.basis(), u0);
    }

    #[test]
    fn aggregate_identical_and_opposite() {
        let u = orthonormal_2_of_3();
        let z = server_aggregate(&[u.clone(), u.clone(), u.clone()]).unwrap();
        assert_relative_eq!(z, u, epsilon = 1e-15);
        let z = server_aggregate(&[u.clone(), -&u]).unwrap();
        assert_eq!(z, Mat::zeros(3, 2));
        assert!(matches!(server_aggregate(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn dual_update_at_consensus_is_a_no_op_for_orthonormal_u() {
        let data = Mat::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let u = orthonormal_2_of_3();
        let state = small_client(&data, u.clone());
        let next = dual_update(&state, &u, &u, 1.5).unwrap();
        assert_eq!(next.y, state.y);
        assert_eq!(next.t, state.t);
        // rho = 0 freezes the duals regardless of the gap.
        let z = Mat::zeros(3, 2);
        let next = dual_update(&state, &u, &z, 0.0).unwrap();
        assert_eq!(next.y, state.y);
        assert_eq!(next.t, state.t);
    }

    #[test]
    fn dual_update_accumulates_the_penalty() {
        let data = Mat::zeros(3, 2);
        let state = small_client(&data, orthonormal_2_of_3());
        let new_u = Mat::from_row_slice(3, 2, &[1.5f64.sqrt(), 0.0, 0.0, 1.0, 0.0, 0.0]);
        let rho = 2.0;
        let next = dual_update(&state, &new_u, &new_u, rho).unwrap();
        assert_relative_eq!(next.t[(0, 0)], rho * 0.25, max_relative = 1e-12);
    }

    #[test]
    fn global_objective_vanishes_when_u_spans_the_data() {
        // Rank-2 data in R^3 and u spanning exactly those two axes.
        let data = Mat::from_row_slice(3, 4, &[1.0, 2.0, -1.0, 0.5, -2.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let u = orthonormal_2_of_3();
        let a = ClientState::new(0, &data, u.clone()).unwrap();
        let b = ClientState::new(1, &data, u.clone()).unwrap();
        let total = objective_at(&[a, b], &u).unwrap();
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn single_client_objective_is_the_centralized_one() {
        let data = Mat::from_row_slice(3, 5, &[1.0, -0.5, 2.0, 0.0, 1.0, 0.5, 1.5, -1.0, 2.0, 0.0, -1.0, 0.5, 0.5, 1.0, 2.0]);
        let u = orthonormal_2_of_3();
        let client = ClientState::new(0, &data, u.clone()).unwrap();
        let direct = {
            let residual = &data - &u * (u.transpose() * &data);
            frobenius_norm_sq(&residual)
        };
        assert_relative_eq!(objective_at(&[client], &u).unwrap(), direct, max_relative = 1e-12);
    }

    #[test]
    fn config_validation() {
        let good = SolverConfig::default();
        assert!(good.validate(20).is_ok());
        assert_eq!(good.sampled_count(20), 2);
        let bad = SolverConfig {
            rho: 0.0,
            ..SolverConfig::default()
        };
        assert!(bad.validate(20).is_err());
        let bad = SolverConfig {
            sample_fraction: 1.5,
            ..SolverConfig::default()
        };
        assert!(bad.validate(20).is_err());
    }
}
