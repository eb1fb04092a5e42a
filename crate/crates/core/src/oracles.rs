//! Independent checks of the solver: log-domain Sinkhorn for the covariate-free
//! case, finite-difference gradients, the monotone change of variables between
//! the quantile-regression dual and couplings, and an epsilon sweep.
//!
//! Nothing here calls the solver's softmax or log-sum-exp code; the kernels
//! below are separate implementations.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classical_qr::{self, QrConfig};
use crate::error::{Result, VqrError};
use crate::measures::{center_covariates, make_rank_grid, Dataset, NodePlacement, RankGrid};
use crate::rvqr::{self, DualVariables, SolverConfig};

/// `log sum exp(v)`, accumulated with a running maximum in one pass.
fn lse(v: impl Iterator<Item = f64>) -> f64 {
    let mut m = f64::NEG_INFINITY;
    let mut s = 0.0;
    for x in v {
        if x <= m {
            s += (x - m).exp();
        } else {
            s = s * (m - x).exp() + 1.0;
            m = x;
        }
    }
    if m == f64::NEG_INFINITY {
        m
    } else {
        m + s.ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkhornResult {
    /// `I x J` coupling `exp((G_ij - f_i - g_j) / eps)`.
    pub coupling: Array2<f64>,
    /// Row potentials `f`.
    pub f: Array1<f64>,
    /// Column potentials `g`.
    pub g: Array1<f64>,
    pub iterations: usize,
    pub row_residual: f64,
    pub col_residual: f64,
}

pub const SINKHORN_MAX_ITER: usize = 1_000_000;

/// Entropic OT in the gain convention: maximizes
/// `sum pi G - eps sum pi log pi` over couplings of `mu` and `nu`.
///
/// For a cost matrix `C` pass `G = -C`.
pub fn sinkhorn(
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    gain: ArrayView2<'_, f64>,
    epsilon: f64,
    tol: f64,
) -> Result<SinkhornResult> {
    sinkhorn_capped(mu, nu, gain, epsilon, tol, SINKHORN_MAX_ITER)
}

pub fn sinkhorn_capped(
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    gain: ArrayView2<'_, f64>,
    epsilon: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SinkhornResult> {
    let (ni, nj) = gain.dim();
    if mu.len() != ni || nu.len() != nj {
        return Err(VqrError::Shape(format!(
            "gain is {ni} x {nj}, marginals have lengths {} and {}",
            mu.len(),
            nu.len()
        )));
    }
    for (name, w) in [("mu", mu), ("nu", nu)] {
        let s: f64 = w.sum();
        if w.iter().any(|&v| !(v > 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(VqrError::InvalidInput(format!(
                "{name} must be positive and sum to one"
            )));
        }
    }
    if gain.iter().any(|v| !v.is_finite()) {
        return Err(VqrError::NonFinite("gain matrix"));
    }
    if !(epsilon > 0.0) {
        return Err(VqrError::Config(format!("epsilon must be positive, got {epsilon}")));
    }

    let log_mu: Vec<f64> = mu.iter().map(|v| v.ln()).collect();
    let log_nu: Vec<f64> = nu.iter().map(|v| v.ln()).collect();
    let mut f = Array1::<f64>::zeros(ni);
    let mut g = Array1::<f64>::zeros(nj);
    let plan = |f: &Array1<f64>, g: &Array1<f64>| {
        Array2::from_shape_fn((ni, nj), |(i, j)| ((gain[[i, j]] - f[i] - g[j]) / epsilon).exp())
    };
    let mut iterations = 0;
    loop {
        // row update makes row sums exact, column update makes column sums exact
        for i in 0..ni {
            f[i] = epsilon * (lse((0..nj).map(|j| (gain[[i, j]] - g[j]) / epsilon)) - log_mu[i]);
        }
        for j in 0..nj {
            g[j] = epsilon * (lse((0..ni).map(|i| (gain[[i, j]] - f[i]) / epsilon)) - log_nu[j]);
        }
        iterations += 1;
        let p = plan(&f, &g);
        let row_res = (&p.sum_axis(Axis(1)) - &mu).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let col_res = (&p.sum_axis(Axis(0)) - &nu).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if row_res <= tol && col_res <= tol {
            return Ok(SinkhornResult {
                coupling: p,
                f,
                g,
                iterations,
                row_residual: row_res,
                col_residual: col_res,
            });
        }
        if iterations >= max_iter {
            return Err(VqrError::SinkhornNotConverged {
                iterations,
                residual: row_res.max(col_res),
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkhornCheck {
    pub max_deviation: f64,
    pub solver_iterations: usize,
    pub sinkhorn_iterations: usize,
}

/// Solves the covariate-free problem both ways and compares couplings.
///
/// Requires centered covariates that vanish identically, in which case the
/// mean-independence constraint is vacuous.
pub fn check_against_sinkhorn(data: &Dataset, grid: &RankGrid, epsilon: f64, tol: f64) -> Result<SinkhornCheck> {
    if data.x().iter().any(|&v| v != 0.0) {
        return Err(VqrError::InvalidInput(
            "Sinkhorn comparison needs covariates that are identically zero after centering".into(),
        ));
    }
    let cfg = SolverConfig::default().with_epsilon(epsilon).with_tol(tol);
    let sol = rvqr::solve(data, grid, &cfg)?;
    let gain = Array2::from_shape_fn((grid.len(), data.n_obs()), |(i, j)| {
        (0..data.dim())
            .map(|k| grid.u()[[i, k]] * data.y()[[j, k]])
            .sum::<f64>()
    });
    let sk = sinkhorn(grid.mu(), data.nu(), gain.view(), epsilon, tol)?;
    let max_deviation = sol
        .coupling
        .alpha
        .iter()
        .zip(sk.coupling.iter())
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(SinkhornCheck {
        max_deviation,
        solver_iterations: sol.report.iterations,
        sinkhorn_iterations: sk.iterations,
    })
}

/// Dual objective by direct nested loops, sharing no code with the solver.
pub fn naive_dual_objective(dv: &DualVariables, data: &Dataset, grid: &RankGrid, epsilon: f64) -> f64 {
    let (x, y, u) = (data.x(), data.y(), grid.u());
    let mut value: f64 = dv.psi.iter().zip(data.nu()).map(|(p, n)| p * n).sum();
    for i in 0..grid.len() {
        let row = (0..data.n_obs()).map(|j| {
            let uy: f64 = (0..data.dim()).map(|k| u[[i, k]] * y[[j, k]]).sum();
            let bx: f64 = (0..data.n_covariates()).map(|k| dv.b[[i, k]] * x[[j, k]]).sum();
            (uy - bx - dv.psi[j]) / epsilon
        });
        value += epsilon * grid.mu()[i] * lse(row);
    }
    value
}

/// Number of coordinates [`check_gradient_fd`] samples at most.
pub const FD_MAX_COORDS: usize = 50;

/// Central finite differences of `f` against `grad` on at most
/// [`FD_MAX_COORDS`] evenly spaced coordinates of the flat `[psi | b]` vector.
///
/// Returns `max_k |fd_k - g_k| / |g|_inf`.
pub fn fd_check<F, G>(dv: &DualVariables, step: f64, f: F, grad: G) -> f64
where
    F: Fn(&DualVariables) -> f64,
    G: Fn(&DualVariables) -> (Array1<f64>, Array2<f64>),
{
    let (gp, gb) = grad(dv);
    let analytic: Vec<f64> = gp.iter().chain(gb.iter()).copied().collect();
    let n = analytic.len();
    let scale = analytic.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-12);
    let count = n.min(FD_MAX_COORDS);
    let nj = dv.psi.len();
    let nk = dv.b.ncols();
    let mut worst = 0.0_f64;
    for s in 0..count {
        let k = s * n / count;
        let bump = |delta: f64| {
            let mut d = dv.clone();
            if k < nj {
                d.psi[k] += delta;
            } else {
                let r = k - nj;
                d.b[[r / nk, r % nk]] += delta;
            }
            f(&d)
        };
        let fd = (bump(step) - bump(-step)) / (2.0 * step);
        worst = worst.max((fd - analytic[k]).abs() / scale);
    }
    worst
}

/// [`fd_check`] applied to the solver's objective and gradient.
pub fn check_gradient_fd(dv: &DualVariables, data: &Dataset, grid: &RankGrid, epsilon: f64, step: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(VqrError::Config(format!(
            "finite-difference step must lie in [1e-7, 1e-3], got {step}"
        )));
    }
    // shape and finiteness errors surface here rather than inside the closures
    rvqr::dual_gradient(dv, data, grid, epsilon)?;
    Ok(fd_check(
        dv,
        step,
        |d| rvqr::dual_objective(d, data, grid, epsilon).expect("validated"),
        |d| rvqr::dual_gradient(d, data, grid, epsilon).expect("validated"),
    ))
}

/// `pi = D^T V / J` with `D` bidiagonal (1 on the diagonal, -1 below), i.e.
/// `pi_tj = (V_tj - V_{t+1,j}) / J`.
///
/// `V` must have entries in `[0, 1]` and columns nonincreasing in `t`.
pub fn monotone_cov_transform(v: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    const SLACK: f64 = 1e-12;
    let (nt, nj) = v.dim();
    for ((t, j), &val) in v.indexed_iter() {
        if !(-SLACK..=1.0 + SLACK).contains(&val) {
            return Err(VqrError::InvalidInput(format!(
                "V[{t}, {j}] = {val} lies outside [0, 1]"
            )));
        }
    }
    for t in 0..nt.saturating_sub(1) {
        for j in 0..nj {
            if v[[t + 1, j]] > v[[t, j]] + SLACK {
                return Err(VqrError::InvalidInput(format!(
                    "V is not nonincreasing: V[{}, {j}] = {} > V[{t}, {j}] = {}",
                    t + 1,
                    v[[t + 1, j]],
                    v[[t, j]]
                )));
            }
        }
    }
    let jf = nj as f64;
    Ok(Array2::from_shape_fn((nt, nj), |(t, j)| {
        let next = if t + 1 < nt { v[[t + 1, j]] } else { 0.0 };
        (v[[t, j]] - next) / jf
    }))
}

/// `V = J (D^T)^{-1} pi`: suffix sums over `t`.
pub fn inverse_cov_transform(pi: ArrayView2<'_, f64>) -> Array2<f64> {
    let (nt, nj) = pi.dim();
    let mut v = Array2::zeros((nt, nj));
    for j in 0..nj {
        let mut acc = 0.0;
        for t in (0..nt).rev() {
            acc += pi[[t, j]];
            v[[t, j]] = acc * nj as f64;
        }
    }
    v
}

/// `sum_tj V_tj y_j`, the quantile-regression dual objective.
pub fn v_objective(v: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    v.dot(&y).sum()
}

/// `sum_tj pi_tj U_t y_j` with `U_t = t / T` (1-based).
pub fn pi_objective(pi: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    let nt = pi.nrows() as f64;
    pi.outer_iter()
        .enumerate()
        .map(|(t, row)| (t + 1) as f64 / nt * row.dot(&y))
        .sum()
}

/// Largest violation of the coupling constraints: nonnegativity, marginals
/// `1/T` and `1/J`, and `sum_j pi_tj x_j = 0`.
pub fn coupling_infeasibility(pi: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>) -> f64 {
    let (nt, nj) = pi.dim();
    let mut worst = pi.iter().fold(0.0_f64, |m, &p| m.max(-p));
    for r in pi.outer_iter() {
        worst = worst.max((r.sum() - 1.0 / nt as f64).abs());
    }
    for c in pi.axis_iter(Axis(1)) {
        worst = worst.max((c.sum() - 1.0 / nj as f64).abs());
    }
    for v in pi.dot(&x).iter() {
        worst = worst.max(v.abs());
    }
    worst
}

/// Largest violation of the dual constraints on `V`: box `[0, 1]`, columns
/// nonincreasing in `t`, `mean_j V_tj = 1 - t_t` and `mean_j V_tj x_j = 0`
/// with `t_t = (t - 1) / T`.
pub fn v_infeasibility(v: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>) -> f64 {
    let (nt, nj) = v.dim();
    let mut worst = v.iter().fold(0.0_f64, |m, &a| m.max(-a).max(a - 1.0));
    for t in 0..nt {
        if t + 1 < nt {
            for j in 0..nj {
                worst = worst.max(v[[t + 1, j]] - v[[t, j]]);
            }
        }
        let row = v.row(t);
        worst = worst.max((row.sum() / nj as f64 - (1.0 - t as f64 / nt as f64)).abs());
        for m in row.dot(&x).iter() {
            worst = worst.max((m / nj as f64).abs());
        }
    }
    worst
}

/// Orthonormal basis (as rows) of `span{1, columns of x}` in `R^J`.
fn span_basis(x: ArrayView2<'_, f64>) -> Vec<Array1<f64>> {
    let nj = x.nrows();
    let mut basis: Vec<Array1<f64>> = Vec::new();
    let mut cands = vec![Array1::from_elem(nj, 1.0)];
    cands.extend(x.axis_iter(Axis(1)).map(|c| c.to_owned()));
    for mut c in cands {
        for _ in 0..2 {
            for b in &basis {
                let p = c.dot(b);
                c.scaled_add(-p, b);
            }
        }
        let n = c.dot(&c).sqrt();
        if n > 1e-10 {
            basis.push(c / n);
        }
    }
    basis
}

/// Random coupling feasible for uniform marginals and mean independence:
/// `pi = mu nu^T + s W` with `W` orthogonal to constants on both sides and to
/// the covariate columns, scaled to keep `pi >= 0`.
pub fn random_feasible_coupling(nt: usize, x: ArrayView2<'_, f64>, rng: &mut impl Rng) -> Array2<f64> {
    let nj = x.nrows();
    let basis = span_basis(x);
    let mut w = Array2::from_shape_fn((nt, nj), |_| rng.gen::<f64>() - 0.5);
    for mut row in w.outer_iter_mut() {
        for b in &basis {
            let p = row.dot(b);
            row.scaled_add(-p, b);
        }
    }
    for mut col in w.axis_iter_mut(Axis(1)) {
        let m = col.mean().unwrap_or(0.0);
        col -= m;
    }
    let base = 1.0 / (nt * nj) as f64;
    let most_negative = w.iter().fold(0.0_f64, |m, &v| m.max(-v));
    let s = if most_negative > 0.0 {
        rng.gen_range(0.1..1.0) * base / most_negative
    } else {
        0.0
    };
    w.mapv(|v| base + s * v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub value: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub samples: usize,
    /// Worst `|sum pi U y - sum V y / (J T)|` over the samples.
    pub objective_error: f64,
    /// Worst round-trip error `|V - inverse(transform(V))|`.
    pub roundtrip_error: f64,
    /// Worst constraint violation of the images in either direction.
    pub feasibility_error: f64,
    pub sweep: Vec<SweepPoint>,
    /// `|val(eps_k) - val(eps_{k+1})|` along the sweep.
    pub differences: Vec<f64>,
    /// Last difference no larger than the first.
    pub cauchy: bool,
    /// Exact unregularized value when covariates vanish (monotone coupling).
    pub ot_value: Option<f64>,
    pub ot_error: Option<f64>,
    pub ot_bound: Option<f64>,
}

/// Value of the monotone (north-west corner) coupling of sorted `u` and `y`,
/// the optimal transport value for the gain `u y` in one dimension.
pub fn monotone_ot_value(u: &[f64], mu: &[f64], y: &[f64], nu: &[f64]) -> f64 {
    let mut iu: Vec<usize> = (0..u.len()).collect();
    iu.sort_by(|&a, &b| u[a].total_cmp(&u[b]));
    let mut iy: Vec<usize> = (0..y.len()).collect();
    iy.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
    let (mut a, mut b) = (0, 0);
    let mut ra = mu[iu[0]];
    let mut rb = nu[iy[0]];
    let mut value = 0.0;
    loop {
        let m = ra.min(rb);
        value += m * u[iu[a]] * y[iy[b]];
        ra -= m;
        rb -= m;
        if ra <= rb {
            a += 1;
            if a == iu.len() {
                break;
            }
            ra += mu[iu[a]];
        } else {
            b += 1;
            if b == iy.len() {
                break;
            }
            rb += nu[iy[b]];
        }
    }
    value
}

/// Certifies that the coupling program and the monotone quantile-regression
/// dual have equal values on a tiny instance, by mapping sampled feasible
/// points both ways, then sweeps `epsilon` downwards.
///
/// `data` must be centered, scalar-response and uniformly weighted; the rank
/// grid is `U_t = t / T`.
pub fn check_equivalence_small(
    data: &Dataset,
    n_ranks: usize,
    epsilons: &[f64],
    samples: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    let nj = data.n_obs();
    if data.dim() != 1 || !data.has_uniform_weights() {
        return Err(VqrError::InvalidInput(
            "equivalence check needs a scalar response with uniform weights".into(),
        ));
    }
    if n_ranks * nj > 400 {
        return Err(VqrError::InvalidInput(format!(
            "instance too large: T J = {}",
            n_ranks * nj
        )));
    }
    let grid = make_rank_grid(1, n_ranks, NodePlacement::RightEndpoint)?;
    let x = data.x();
    let y = data.y().column(0).to_owned();
    let jt = (nj * n_ranks) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut objective_error = 0.0_f64;
    let mut roundtrip_error = 0.0_f64;
    let mut feasibility_error = 0.0_f64;
    let mut vs = Vec::with_capacity(samples);
    for _ in 0..samples {
        // coupling -> V
        let pi = random_feasible_coupling(n_ranks, x, &mut rng);
        let v = inverse_cov_transform(pi.view());
        feasibility_error = feasibility_error.max(v_infeasibility(v.view(), x));
        objective_error =
            objective_error.max((pi_objective(pi.view(), y.view()) - v_objective(v.view(), y.view()) / jt).abs());
        vs.push(v);
    }
    for k in 0..samples {
        // V (a convex combination, so feasible by convexity) -> coupling
        let w: f64 = rng.gen();
        let v = &vs[k] * w + &vs[(k + 1) % samples] * (1.0 - w);
        let v = v.mapv(|a| a.clamp(0.0, 1.0));
        let pi = monotone_cov_transform(v.view())?;
        feasibility_error = feasibility_error.max(coupling_infeasibility(pi.view(), x));
        objective_error =
            objective_error.max((pi_objective(pi.view(), y.view()) - v_objective(v.view(), y.view()) / jt).abs());
        let back = inverse_cov_transform(pi.view());
        roundtrip_error = roundtrip_error.max((&back - &v).iter().fold(0.0_f64, |m, d| m.max(d.abs())));
    }

    let mut sweep = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let cfg = SolverConfig::default().with_epsilon(eps).with_tol(1e-10);
        let (value, converged) = match rvqr::solve(data, &grid, &cfg) {
            Ok(s) => (s.report.dual_value, true),
            Err(VqrError::NotConverged(u)) => (u.report.dual_value, false),
            Err(e) => return Err(e),
        };
        sweep.push(SweepPoint {
            epsilon: eps,
            value,
            converged,
        });
    }
    let differences: Vec<f64> = sweep.windows(2).map(|w| (w[0].value - w[1].value).abs()).collect();
    let cauchy = match (differences.first(), differences.last()) {
        (Some(a), Some(b)) => b <= a,
        _ => true,
    };

    let (mut ot_value, mut ot_error, mut ot_bound) = (None, None, None);
    if x.iter().all(|&v| v == 0.0) {
        if let Some(last) = sweep.last() {
            let u: Vec<f64> = grid.u().column(0).to_vec();
            let ot = monotone_ot_value(
                &u,
                grid.mu().as_slice().expect("contiguous"),
                y.as_slice().expect("contiguous"),
                data.nu().as_slice().expect("contiguous"),
            );
            ot_value = Some(ot);
            ot_error = Some((last.value - ot).abs());
            ot_bound = Some(5.0 * last.epsilon * ((n_ranks * nj) as f64).ln());
        }
    }

    Ok(EquivalenceReport {
        samples,
        objective_error,
        roundtrip_error,
        feasibility_error,
        sweep,
        differences,
        cauchy,
        ot_value,
        ot_error,
        ot_bound,
    })
}

/// Random centered instance: `I` nodes in `(0, 1]^d` with random weights,
/// `J` observations with `N` covariates.
pub fn random_instance(seed: u64, ni: usize, nj: usize, nk: usize, d: usize) -> Result<(Dataset, RankGrid)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Array2::from_shape_fn((ni, d), |_| 1.0 - rng.gen::<f64>());
    let mu = Array1::from_shape_fn(ni, |_| 0.5 + rng.gen::<f64>());
    let grid = RankGrid::from_nodes(u, mu)?;
    let x = Array2::from_shape_fn((nj, nk), |_| rng.gen::<f64>() * 2.0 - 1.0);
    let y = Array2::from_shape_fn((nj, d), |_| rng.gen::<f64>());
    Ok((center_covariates(&Dataset::new(x, y)?), grid))
}

/// Random dual point of moderate size for gradient checks.
pub fn random_dual(seed: u64, nj: usize, ni: usize, nk: usize) -> DualVariables {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dv = DualVariables::zeros(nj, ni, nk);
    dv.psi.mapv_inplace(|_| rng.gen::<f64>() - 0.5);
    dv.b.mapv_inplace(|_| rng.gen::<f64>() - 0.5);
    dv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    fn at_most(name: &str, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.into(),
            passed: measured <= threshold,
            measured,
            threshold,
            detail: detail.into(),
        }
    }

    fn failed(name: &str, err: &VqrError) -> Self {
        CheckResult {
            name: name.into(),
            passed: false,
            measured: f64::NAN,
            threshold: f64::NAN,
            detail: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

fn run(name: &str, f: impl FnOnce() -> Result<CheckResult>) -> CheckResult {
    f().unwrap_or_else(|e| CheckResult::failed(name, &e))
}

/// Runs every oracle on seeded instances.
pub fn run_suite(seed: u64) -> SuiteReport {
    let mut checks = Vec::new();

    checks.push(run("gradient_fd", || {
        let mut worst = 0.0_f64;
        for (k, eps) in [0.1, 0.5, 1.0].into_iter().enumerate() {
            let s = seed.wrapping_add(k as u64);
            let (data, grid) = random_instance(s, 5, 7, 2, 2)?;
            let dv = random_dual(s, 7, 5, 2);
            worst = worst.max(check_gradient_fd(&dv, &data, &grid, eps, 1e-5)?);
        }
        Ok(CheckResult::at_most(
            "gradient_fd",
            worst,
            1e-5,
            "I=5 J=7 N=2 d=2, eps in {0.1, 0.5, 1}",
        ))
    }));

    checks.push(run("gradient_fd_stress", || {
        let (data, grid) = random_instance(seed ^ 0x5eed, 10, 20, 2, 1)?;
        let dv = random_dual(seed ^ 0x5eed, 20, 10, 2);
        let err = check_gradient_fd(&dv, &data, &grid, 0.05, 1e-5)?;
        Ok(CheckResult::at_most("gradient_fd_stress", err, 1e-4, "eps = 0.05"))
    }));

    checks.push(run("naive_objective", || {
        let (data, grid) = random_instance(seed.wrapping_add(11), 8, 12, 3, 2)?;
        let dv = random_dual(seed.wrapping_add(11), 12, 8, 3);
        let a = rvqr::dual_objective(&dv, &data, &grid, 0.3)?;
        let b = naive_dual_objective(&dv, &data, &grid, 0.3);
        Ok(CheckResult::at_most(
            "naive_objective",
            (a - b).abs() / b.abs().max(1.0),
            1e-12,
            "solver objective vs nested-loop evaluation",
        ))
    }));

    checks.push(run("gauge_invariance", || {
        let (data, grid) = random_instance(seed.wrapping_add(21), 6, 15, 2, 1)?;
        let dv = random_dual(seed.wrapping_add(21), 15, 6, 2);
        let base = rvqr::dual_objective(&dv, &data, &grid, 0.5)?;
        let mut moved = dv.clone();
        let c = Array1::from(vec![0.7, -1.3]);
        for mut r in moved.b.outer_iter_mut() {
            r += &c;
        }
        moved.psi = &moved.psi - &data.x().dot(&c) + 2.5;
        let after = rvqr::dual_objective(&moved, &data, &grid, 0.5)?;
        Ok(CheckResult::at_most(
            "gauge_invariance",
            (after - base).abs() / base.abs().max(1.0),
            1e-12,
            "J unchanged under psi + 2.5 combined with (b + c, psi - X c)",
        ))
    }));

    checks.push(run("sinkhorn_equivalence", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(31));
        let y = Array2::from_shape_fn((10, 1), |_| rng.gen::<f64>());
        let data = center_covariates(&Dataset::new(Array2::zeros((10, 1)), y)?);
        let grid = make_rank_grid(1, 10, NodePlacement::RightEndpoint)?;
        let r = check_against_sinkhorn(&data, &grid, 0.1, 1e-10)?;
        Ok(CheckResult::at_most(
            "sinkhorn_equivalence",
            r.max_deviation,
            1e-6,
            "I = J = 10, eps = 0.1",
        ))
    }));

    checks.push(run("sinkhorn_2x2", || {
        let mu = Array1::from(vec![0.5, 0.5]);
        let g = Array2::eye(2);
        let r = sinkhorn(mu.view(), mu.view(), g.view(), 1.0, 1e-14)?;
        let e = std::f64::consts::E;
        let a = e / (2.0 * (1.0 + e));
        Ok(CheckResult::at_most(
            "sinkhorn_2x2",
            (r.coupling[[0, 0]] - a)
                .abs()
                .max((r.coupling[[0, 1]] - (0.5 - a)).abs()),
            1e-12,
            "closed form e / (2 (1 + e))",
        ))
    }));

    checks.push(run("duality_gap", || {
        let (data, grid) = random_instance(seed.wrapping_add(41), 20, 50, 2, 1)?;
        let sol = rvqr::solve(&data, &grid, &SolverConfig::default().with_epsilon(0.1).with_tol(1e-9))?;
        let r = &sol.report;
        Ok(CheckResult::at_most(
            "duality_gap",
            r.duality_gap / r.dual_value.abs().max(1e-2),
            1e-6,
            format!("I=20 J=50 N=2, {} iterations", r.iterations),
        ))
    }));

    checks.push(run("cov_transform", || {
        let (data, _) = random_instance(seed.wrapping_add(51), 2, 12, 1, 1)?;
        let r = check_equivalence_small(&data, 6, &[], 10, seed)?;
        Ok(CheckResult::at_most(
            "cov_transform",
            r.objective_error.max(r.roundtrip_error).max(r.feasibility_error),
            1e-12,
            "objective, round trip and feasibility over 10 samples",
        ))
    }));

    checks.push(run("epsilon_sweep", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(61));
        let y = Array2::from_shape_fn((10, 1), |_| rng.gen::<f64>());
        let data = center_covariates(&Dataset::new(Array2::zeros((10, 1)), y)?);
        let r = check_equivalence_small(&data, 10, &[1.0, 0.5, 0.1, 0.05], 2, seed)?;
        let err = r.ot_error.unwrap_or(f64::INFINITY);
        let bound = r.ot_bound.unwrap_or(0.0);
        let mut c = CheckResult::at_most(
            "epsilon_sweep",
            err,
            bound,
            format!("differences {:?}, cauchy {}", r.differences, r.cauchy),
        );
        c.passed &= r.cauchy && r.sweep.iter().all(|p| p.converged);
        Ok(c)
    }));

    checks.push(run("qr_intercept_only", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(71));
        let n = 301;
        let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let data = Dataset::new(
            Array2::zeros((n, 0)),
            Array2::from_shape_vec((n, 1), y.clone()).expect("shape"),
        )?;
        let cfg = QrConfig::default();
        let h = cfg.smoothing * data.y_scale();
        let mut worst = 0.0_f64;
        for t in [0.1, 0.25, 0.5, 0.9] {
            let fit = classical_qr::fit_qr_t(&data, t, &cfg)?;
            worst = worst.max((fit.alpha - classical_qr::empirical_quantile(&y, t)).abs());
        }
        Ok(CheckResult::at_most(
            "qr_intercept_only",
            worst,
            h,
            "J = 301, t in {0.1, 0.25, 0.5, 0.9}",
        ))
    }));

    let passed = checks.iter().all(|c| c.passed);
    SuiteReport { seed, passed, checks }
}
