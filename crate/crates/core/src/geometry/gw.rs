use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dimension, domain, Error, Result};
use crate::numeric::{log_sum_exp, rng_from_seed};

use super::space::SemanticVectorSpace;

/// Tolerance on coupling marginals at construction.
pub const COUPLING_TOL: f64 = 1e-8;

/// Marginal mismatch tolerated by [`gw_cost`].
pub const COST_MARGINAL_TOL: f64 = 1e-6;

/// Largest point count handled by the permutation oracle.
pub const ORACLE_MAX_POINTS: usize = 6;

/// Transport plan between two weighted point sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    plan: DMatrix<f64>,
}

impl Coupling {
    /// Validates nonnegativity and marginals within [`COUPLING_TOL`].
    pub fn new(plan: DMatrix<f64>, source: &[f64], target: &[f64]) -> Result<Self> {
        check_marginals(&plan, source, target, COUPLING_TOL)?;
        Ok(Self { plan })
    }

    /// `mu nu^T`.
    pub fn product(source: &[f64], target: &[f64]) -> Self {
        Self {
            plan: DMatrix::from_fn(source.len(), target.len(), |i, j| source[i] * target[j]),
        }
    }

    /// Diagonal plan `diag(weights)` pairing each point with itself.
    pub fn identity(weights: &[f64]) -> Self {
        let m = weights.len();
        Self {
            plan: DMatrix::from_fn(m, m, |i, j| if i == j { weights[i] } else { 0.0 }),
        }
    }

    /// Uniform-weight permutation plan sending point `i` to `perm[i]`.
    pub fn permutation(perm: &[usize]) -> Self {
        let m = perm.len();
        let mut plan = DMatrix::zeros(m, m);
        for (i, &j) in perm.iter().enumerate() {
            plan[(i, j)] = 1.0 / m as f64;
        }
        Self { plan }
    }

    pub fn plan(&self) -> &DMatrix<f64> {
        &self.plan
    }

    pub fn into_plan(self) -> DMatrix<f64> {
        self.plan
    }

    /// Largest absolute marginal violation against the given weights.
    pub fn marginal_error(&self, source: &[f64], target: &[f64]) -> f64 {
        marginal_error(&self.plan, source, target)
    }
}

fn marginal_error(plan: &DMatrix<f64>, source: &[f64], target: &[f64]) -> f64 {
    let rows = plan.row_iter().zip(source).map(|(r, s)| (r.sum() - s).abs());
    let cols = plan.column_iter().zip(target).map(|(c, t)| (c.sum() - t).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

fn check_marginals(plan: &DMatrix<f64>, source: &[f64], target: &[f64], tol: f64) -> Result<()> {
    if plan.shape() != (source.len(), target.len()) {
        return Err(dimension(format!(
            "plan is {:?}, marginals are {} and {}",
            plan.shape(),
            source.len(),
            target.len()
        )));
    }
    if plan.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Contract("plan entries must be finite and nonnegative".into()));
    }
    let err = marginal_error(plan, source, target);
    if err > tol {
        return Err(Error::Contract(format!("plan marginals off by {err:e}")));
    }
    Ok(())
}

/// Quadratic discrepancy `sum_{ijkl} (G1_ik - G2_jl)^2 pi_ij pi_kl` between two
/// Gram matrices under the plan `pi`, expanded as
/// `p^T G1^2 p + q^T G2^2 q - 2 <G1 pi G2, pi>` with `p`, `q` the plan's own
/// marginals (squares entrywise).
pub fn gw_cost_gram(g1: &DMatrix<f64>, g2: &DMatrix<f64>, plan: &DMatrix<f64>) -> Result<f64> {
    if plan.shape() != (g1.nrows(), g2.nrows()) || !g1.is_square() || !g2.is_square() {
        return Err(dimension("Gram matrices and plan do not fit"));
    }
    let p = plan.column_sum();
    let q = plan.row_sum().transpose();
    let g1sq = g1.component_mul(g1);
    let g2sq = g2.component_mul(g2);
    let a = p.dot(&(&g1sq * &p));
    let b = q.dot(&(&g2sq * &q));
    let cross = (g1 * plan * g2).dot(plan);
    let v = a + b - 2.0 * cross;
    if !v.is_finite() {
        return Err(Error::NonFinite("GW cost".into()));
    }
    Ok(v.max(0.0))
}

/// GW discrepancy of two spaces under `coupling`; the coupling must match
/// the space weights within [`COST_MARGINAL_TOL`].
pub fn gw_cost(a: &SemanticVectorSpace, b: &SemanticVectorSpace, coupling: &Coupling) -> Result<f64> {
    check_marginals(coupling.plan(), a.weights(), b.weights(), COST_MARGINAL_TOL)?;
    gw_cost_gram(&a.gram(), &b.gram(), coupling.plan())
}

/// Linearisation of the GW cost at `plan`:
/// `L_ij = (G1^2 p)_i + (G2^2 q)_j - 2 (G1 plan G2)_ij`.
fn linearized_cost(g1: &DMatrix<f64>, g2: &DMatrix<f64>, plan: &DMatrix<f64>) -> DMatrix<f64> {
    let p = plan.column_sum();
    let q = plan.row_sum().transpose();
    let a = g1.component_mul(g1) * p;
    let b = g2.component_mul(g2) * q;
    let cross = g1 * plan * g2;
    DMatrix::from_fn(plan.nrows(), plan.ncols(), |i, j| a[i] + b[j] - 2.0 * cross[(i, j)])
}

/// Result of the permutation oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub cost: f64,
    /// `perm[i]` is the target point matched to source point `i`.
    pub permutation: Vec<usize>,
    pub coupling: Coupling,
}

/// Minimum of the GW cost over all permutation couplings of two Gram
/// matrices of equal size `M <= 6` with uniform weights. The first minimiser
/// in lexicographic order is returned.
pub fn gw_oracle_gram(g1: &DMatrix<f64>, g2: &DMatrix<f64>) -> Result<OracleResult> {
    let m = g1.nrows();
    if g2.nrows() != m {
        return Err(Error::OracleScope("spaces must have the same number of points".into()));
    }
    if m > ORACLE_MAX_POINTS {
        return Err(Error::OracleScope(format!(
            "{m} points exceeds the oracle limit of {ORACLE_MAX_POINTS}"
        )));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..m).permutations(m) {
        // Uniform weights: cost is (1/M^2) sum_ik (G1_ik - G2_{perm i, perm k})^2.
        let mut acc = 0.0;
        for i in 0..m {
            for k in 0..m {
                let d = g1[(i, k)] - g2[(perm[i], perm[k])];
                acc += d * d;
            }
        }
        let cost = acc / (m * m) as f64;
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, perm));
        }
    }
    let (cost, permutation) = best.expect("at least one permutation");
    Ok(OracleResult {
        cost,
        coupling: Coupling::permutation(&permutation),
        permutation,
    })
}

/// Permutation oracle on two spaces; both must have uniform weights.
pub fn gw_distance_oracle(a: &SemanticVectorSpace, b: &SemanticVectorSpace) -> Result<OracleResult> {
    let uniform = |s: &SemanticVectorSpace| {
        let m = s.count() as f64;
        s.weights().iter().all(|w| (w - 1.0 / m).abs() <= 1e-12)
    };
    if !uniform(a) || !uniform(b) {
        return Err(Error::OracleScope("the oracle needs uniform weights".into()));
    }
    gw_oracle_gram(&a.gram(), &b.gram())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornResult {
    pub plan: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest absolute marginal violation of `plan`.
    pub marginal_error: f64,
}

/// Entropic optimal transport by log-domain Sinkhorn iterations.
///
/// Minimises `<C, pi> - eps H(pi)` over couplings of `mu` and `nu`. Stops
/// once the marginal violation is at most `tol`; otherwise returns the last
/// iterate with `converged = false`.
pub fn sinkhorn(
    cost: &DMatrix<f64>,
    mu: &[f64],
    nu: &[f64],
    eps: f64,
    tol: f64,
    max_iters: usize,
) -> Result<SinkhornResult> {
    if cost.shape() != (mu.len(), nu.len()) {
        return Err(dimension("cost matrix does not match marginals"));
    }
    if !(eps > 0.0) {
        return Err(domain("epsilon must be positive"));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    crate::numeric::check_distribution(mu, 1e-9, "source marginal")?;
    crate::numeric::check_distribution(nu, 1e-9, "target marginal")?;
    let mut f = vec![0.0; mu.len()];
    let mut g = vec![0.0; nu.len()];
    Ok(sinkhorn_from(cost, mu, nu, eps, tol, max_iters, &mut f, &mut g))
}

/// Sinkhorn iterations starting from the dual potentials `f`, `g`, which are
/// updated in place. Inputs are assumed validated.
#[allow(clippy::too_many_arguments)]
fn sinkhorn_from(
    cost: &DMatrix<f64>,
    mu: &[f64],
    nu: &[f64],
    eps: f64,
    tol: f64,
    max_iters: usize,
    f: &mut [f64],
    g: &mut [f64],
) -> SinkhornResult {
    let (m, n) = cost.shape();
    let log_mu: Vec<f64> = mu.iter().map(|v| v.ln()).collect();
    let log_nu: Vec<f64> = nu.iter().map(|v| v.ln()).collect();
    let plan_of = |f: &[f64], g: &[f64]| {
        DMatrix::from_fn(m, n, |i, j| {
            if mu[i] == 0.0 || nu[j] == 0.0 {
                0.0
            } else {
                ((f[i] + g[j] - cost[(i, j)]) / eps).exp()
            }
        })
    };
    let mut iterations = 0;
    let mut err = marginal_error(&plan_of(f, g), mu, nu);
    let mut buf = vec![0.0; m.max(n)];
    while err > tol && iterations < max_iters {
        iterations += 1;
        for i in 0..m {
            for j in 0..n {
                buf[j] = (g[j] - cost[(i, j)]) / eps;
            }
            f[i] = if mu[i] == 0.0 {
                0.0
            } else {
                eps * (log_mu[i] - log_sum_exp(&buf[..n]))
            };
        }
        for j in 0..n {
            for i in 0..m {
                buf[i] = (f[i] - cost[(i, j)]) / eps;
            }
            g[j] = if nu[j] == 0.0 {
                0.0
            } else {
                eps * (log_nu[j] - log_sum_exp(&buf[..m]))
            };
        }
        err = marginal_error(&plan_of(f, g), mu, nu);
    }
    SinkhornResult {
        plan: plan_of(f, g),
        converged: err <= tol,
        iterations,
        marginal_error: err,
    }
}

/// Moves a nonnegative plan onto the exact marginals: rows and columns are
/// scaled down where they exceed their targets, then the deficit is filled
/// with the outer product of the remaining row and column mass.
pub fn round_to_marginals(plan: &DMatrix<f64>, mu: &[f64], nu: &[f64]) -> DMatrix<f64> {
    let mut p = plan.clone();
    for (i, &target) in mu.iter().enumerate() {
        let s = p.row(i).sum();
        if s > target {
            let mut row = p.row_mut(i);
            row *= target / s;
        }
    }
    for (j, &target) in nu.iter().enumerate() {
        let s = p.column(j).sum();
        if s > target {
            let mut col = p.column_mut(j);
            col *= target / s;
        }
    }
    let dr = DVector::from_fn(mu.len(), |i, _| (mu[i] - p.row(i).sum()).max(0.0));
    let dc = DVector::from_fn(nu.len(), |j, _| (nu[j] - p.column(j).sum()).max(0.0));
    let missing = dr.sum();
    if missing > 0.0 {
        p += (&dr * dc.transpose()) / missing;
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropicGwConfig {
    pub eps_start: f64,
    pub eps_end: f64,
    /// Geometric factor between successive regularisation levels.
    pub anneal_factor: f64,
    /// Outer (linearisation) iterations per level.
    pub max_iters: usize,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iters: usize,
    /// Additional random starting plans besides the product coupling.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for EntropicGwConfig {
    fn default() -> Self {
        Self {
            eps_start: 1.0,
            eps_end: 1e-3,
            anneal_factor: 0.5,
            max_iters: 50,
            sinkhorn_tol: 1e-10,
            sinkhorn_max_iters: 500,
            restarts: 8,
            seed: 0,
        }
    }
}

impl EntropicGwConfig {
    /// The regularisation levels visited, from `eps_start` down to `eps_end`.
    pub fn schedule(&self) -> Vec<f64> {
        let mut out = vec![self.eps_start];
        let mut e = self.eps_start;
        while e > self.eps_end * (1.0 + 1e-12) && self.anneal_factor < 1.0 {
            e = (e * self.anneal_factor).max(self.eps_end);
            out.push(e);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropicGwResult {
    pub cost: f64,
    pub coupling: Coupling,
    /// Every inner Sinkhorn solve reached its tolerance.
    pub converged: bool,
    /// Cost of the accepted plan after each outer iteration of the winning
    /// start; non-increasing.
    pub trace: Vec<f64>,
}

/// Entropic GW by alternating linearisation with an annealed regulariser.
///
/// At each outer iteration the cost is linearised at the current plan and
/// the resulting transport problem is solved by [`sinkhorn`]; the new plan
/// is rounded onto the marginals and accepted only if it does not increase
/// the GW cost. Several starting plans are tried (the product coupling and
/// `restarts` seeded random plans) and the best result is returned.
pub fn gw_distance_entropic(
    a: &SemanticVectorSpace,
    b: &SemanticVectorSpace,
    cfg: &EntropicGwConfig,
) -> Result<EntropicGwResult> {
    if !(cfg.eps_start > 0.0 && cfg.eps_end > 0.0 && cfg.eps_end <= cfg.eps_start) {
        return Err(domain("epsilon schedule must be positive and decreasing"));
    }
    if !(cfg.anneal_factor > 0.0 && cfg.anneal_factor <= 1.0) {
        return Err(domain("anneal factor must lie in (0, 1]"));
    }
    let (mu, nu) = (a.weights(), b.weights());
    let (g1, g2) = (a.gram(), b.gram());
    let mut starts = vec![Coupling::product(mu, nu).into_plan()];
    let mut rng = rng_from_seed(cfg.seed);
    for _ in 0..cfg.restarts {
        use rand::Rng;
        let r = DMatrix::from_fn(mu.len(), nu.len(), |_, _| rng.random::<f64>().powi(4));
        // Scale the random kernel onto the marginals (Sinkhorn with cost -ln r).
        let cost = r.map(|v| -(v.max(1e-300)).ln());
        let s = sinkhorn(&cost, mu, nu, 1.0, 1e-12, 10_000)?;
        starts.push(round_to_marginals(&s.plan, mu, nu));
    }
    let schedule = cfg.schedule();
    let mut best: Option<EntropicGwResult> = None;
    for start in starts {
        let mut plan = start;
        let mut cost = gw_cost_gram(&g1, &g2, &plan)?;
        let mut trace = vec![cost];
        let mut converged = true;
        // Potentials carry over between linearisations and levels.
        let (mut f, mut g) = (vec![0.0; mu.len()], vec![0.0; nu.len()]);
        for &eps in &schedule {
            for _ in 0..cfg.max_iters {
                let lin = linearized_cost(&g1, &g2, &plan);
                if lin.iter().any(|c| !c.is_finite()) {
                    return Err(Error::NonFinite("linearised cost".into()));
                }
                let s = sinkhorn_from(
                    &lin,
                    mu,
                    nu,
                    eps,
                    cfg.sinkhorn_tol,
                    cfg.sinkhorn_max_iters,
                    &mut f,
                    &mut g,
                );
                converged &= s.converged;
                let cand = round_to_marginals(&s.plan, mu, nu);
                let c = gw_cost_gram(&g1, &g2, &cand)?;
                if c <= cost {
                    let gain = cost - c;
                    plan = cand;
                    cost = c;
                    trace.push(cost);
                    if gain <= 1e-14 {
                        break;
                    }
                } else {
                    break;
                }
            }
        }
        if best.as_ref().is_none_or(|b| cost < b.cost) {
            best = Some(EntropicGwResult {
                cost,
                coupling: Coupling { plan },
                converged,
                trace,
            });
        }
    }
    Ok(best.expect("at least one start"))
}
