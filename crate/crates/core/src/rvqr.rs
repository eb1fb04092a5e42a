//! Regularized vector quantile regression on the smoothed dual.
//!
//! With `theta_ij = (u_i.y_j - b_i.x_j - psi_j) / eps` the objective is
//!
//! ```text
//! J(psi, b) = sum_j psi_j nu_j + eps sum_i mu_i log sum_j exp(theta_ij)
//! ```
//!
//! whose gradient is `nu - (column sums of alpha)` in `psi` and
//! `-(sum_j alpha_ij x_j)` in `b_i`, where `alpha_ij = mu_i softmax_j(theta_i)`
//! is the regularized coupling. Stationarity is therefore exactly primal
//! feasibility: fixed marginals plus mean independence of `X` and `U`.
//!
//! `J` is invariant under `psi += lambda` and, for centered `X`, under
//! `(b_i, psi_j) -> (b_i + c, psi_j - c.x_j)`; [`normalize`] fixes both gauges.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accel::{self, AccelConfig, Objective, StepRule};
use crate::error::{Result, VqrError};
use crate::measures::{Dataset, RankGrid};

/// Cell count above which rows are evaluated in parallel.
const PAR_CELLS: usize = 1 << 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepMode {
    Fixed,
    #[default]
    Backtracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Restart {
    None,
    #[default]
    FunctionValue,
}

/// Which potential `phi` backs potential-based quantile reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiMode {
    #[default]
    Soft,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopRule {
    /// Gradient inf-norm, i.e. the marginal and mean-independence residuals.
    #[default]
    Gradient,
    /// L2 change of the coupling between accepted iterates.
    PlanChange,
}

/// Only the full-batch backend is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    #[default]
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub epsilon: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub step_mode: StepMode,
    pub restart: Restart,
    pub phi_mode: PhiMode,
    #[serde(default)]
    pub stop_rule: StopRule,
    #[serde(default)]
    pub backend: Backend,
    /// Sufficient-decrease factor of the backtracking search.
    #[serde(default = "default_armijo")]
    pub armijo: f64,
}

fn default_armijo() -> f64 {
    1e-4
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            epsilon: 0.1,
            tol: 1e-8,
            max_iter: 50_000,
            step_mode: StepMode::Backtracking,
            restart: Restart::FunctionValue,
            phi_mode: PhiMode::Soft,
            stop_rule: StopRule::Gradient,
            backend: Backend::Batch,
            armijo: default_armijo(),
        }
    }
}

impl SolverConfig {
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(VqrError::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(VqrError::Config(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(VqrError::Config("max_iter must be at least 1".into()));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(VqrError::Config("armijo factor must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Normalizations applied to reach the canonical gauge.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Gauge {
    /// Accumulated translation subtracted from every `b_i` (the former `b_1`).
    pub b_shift: Vec<f64>,
    /// Accumulated constant added to `psi`.
    pub psi_shift: f64,
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualVariables {
    /// One potential per observation, length `J`.
    pub psi: Array1<f64>,
    /// One slope per rank node, `I x N`.
    pub b: Array2<f64>,
    pub gauge: Gauge,
}

impl DualVariables {
    pub fn zeros(n_obs: usize, n_ranks: usize, n_cov: usize) -> Self {
        DualVariables {
            psi: Array1::zeros(n_obs),
            b: Array2::zeros((n_ranks, n_cov)),
            gauge: Gauge {
                b_shift: vec![0.0; n_cov],
                ..Default::default()
            },
        }
    }

    fn to_flat(&self) -> Vec<f64> {
        self.psi.iter().chain(self.b.iter()).copied().collect()
    }

    fn from_flat(v: &[f64], n_obs: usize, n_ranks: usize, n_cov: usize) -> Self {
        let psi = Array1::from(v[..n_obs].to_vec());
        let b = Array2::from_shape_vec((n_ranks, n_cov), v[n_obs..].to_vec()).expect("flat layout matches shape");
        DualVariables {
            psi,
            b,
            gauge: Gauge {
                b_shift: vec![0.0; n_cov],
                ..Default::default()
            },
        }
    }

    fn is_finite(&self) -> bool {
        self.psi.iter().chain(self.b.iter()).all(|v| v.is_finite())
    }
}

/// Regularized coupling with its feasibility residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    /// `I x J` nonnegative masses.
    pub alpha: Array2<f64>,
    /// `sum_j alpha_ij - mu_i`.
    pub row_residual: Array1<f64>,
    /// `sum_i alpha_ij - nu_j`.
    pub col_residual: Array1<f64>,
    /// `sum_j alpha_ij x_j`, `I x N`.
    pub mi_residual: Array2<f64>,
}

impl Coupling {
    pub fn col_residual_norm(&self) -> f64 {
        accel::inf_norm(self.col_residual.as_slice().expect("contiguous"))
    }

    pub fn mi_residual_norm(&self) -> f64 {
        self.mi_residual.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn row_residual_norm(&self) -> f64 {
        self.row_residual.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `(i, j, alpha_ij)` for entries above `threshold`, row-major.
    pub fn triples(&self, threshold: f64) -> Vec<(usize, usize, f64)> {
        self.alpha
            .indexed_iter()
            .filter(|(_, &a)| a > threshold)
            .map(|((i, j), &a)| (i, j, a))
            .collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W, threshold: f64) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["i", "j", "alpha"])?;
        for (i, j, a) in self.triples(threshold) {
            wr.write_record([i.to_string(), j.to_string(), format!("{a:e}")])?;
        }
        wr.flush().map_err(|e| VqrError::Io {
            path: "<coupling>".into(),
            source: e,
        })?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub evaluations: usize,
    pub restarts: usize,
    pub converged: bool,
    pub epsilon: f64,
    /// Smoothed dual objective `J` at the returned point.
    pub objective: f64,
    /// `J + eps H(mu)`: the dual value of the plain-entropy primal.
    pub dual_value: f64,
    pub primal_value: f64,
    pub duality_gap: f64,
    pub relative_gap: f64,
    pub grad_norm: f64,
    pub col_residual: f64,
    pub mi_residual: f64,
    pub wall_time_secs: f64,
    /// Objective at every accepted iterate.
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub dual: DualVariables,
    pub coupling: Coupling,
    pub report: SolveReport,
}

/// Payload of a run that hit `max_iter`: the last iterate (normalized) and its report.
#[derive(Debug, Clone)]
pub struct Unconverged {
    pub dual: DualVariables,
    pub coupling: Coupling,
    pub report: SolveReport,
}

fn check_shapes(dv: &DualVariables, data: &Dataset, grid: &RankGrid) -> Result<()> {
    if grid.dim() != data.dim() {
        return Err(VqrError::Shape(format!(
            "grid dimension {} != response dimension {}",
            grid.dim(),
            data.dim()
        )));
    }
    if dv.psi.len() != data.n_obs() || dv.b.dim() != (grid.len(), data.n_covariates()) {
        return Err(VqrError::Shape(format!(
            "dual variables ({}, {:?}) do not match J = {}, I x N = {} x {}",
            dv.psi.len(),
            dv.b.dim(),
            data.n_obs(),
            grid.len(),
            data.n_covariates()
        )));
    }
    Ok(())
}

/// `u_i . y_j`, the gain matrix (`I x J`).
pub fn gain_matrix(data: &Dataset, grid: &RankGrid) -> Array2<f64> {
    grid.u().dot(&data.y().t())
}

/// `theta_ij = (u_i.y_j - b_i.x_j - psi_j) / eps`.
pub fn theta(dv: &DualVariables, data: &Dataset, grid: &RankGrid, epsilon: f64) -> Result<Array2<f64>> {
    check_shapes(dv, data, grid)?;
    let mut t = gain_matrix(data, grid) - dv.b.dot(&data.x().t());
    for mut row in t.axis_iter_mut(Axis(0)) {
        row -= &dv.psi;
        row /= epsilon;
    }
    Ok(t)
}

/// Dense evaluation engine for the smoothed dual.
pub(crate) struct DualProblem<'a> {
    data: &'a Dataset,
    grid: &'a RankGrid,
    gain: Array2<f64>,
    epsilon: f64,
}

pub(crate) struct Evaluation {
    pub value: f64,
    pub grad_psi: Vec<f64>,
    /// Row-major `I x N`.
    pub grad_b: Vec<f64>,
}

impl<'a> DualProblem<'a> {
    pub(crate) fn new(data: &'a Dataset, grid: &'a RankGrid, epsilon: f64) -> Self {
        DualProblem {
            data,
            grid,
            gain: gain_matrix(data, grid),
            epsilon,
        }
    }

    fn n_obs(&self) -> usize {
        self.data.n_obs()
    }

    fn n_ranks(&self) -> usize {
        self.grid.len()
    }

    fn n_cov(&self) -> usize {
        self.data.n_covariates()
    }

    /// Fills one row of `alpha` and returns `(logsumexp of theta_i, grad_b_i)`.
    fn row(&self, i: usize, psi: &[f64], b_i: &[f64], out: &mut [f64], gb: &mut [f64]) -> f64 {
        let x = self.data.x();
        let g = self.gain.row(i);
        let inv = 1.0 / self.epsilon;
        let mut m = f64::NEG_INFINITY;
        for (j, o) in out.iter_mut().enumerate() {
            let mut a = g[j] - psi[j];
            for (k, bk) in b_i.iter().enumerate() {
                a -= bk * x[[j, k]];
            }
            let t = a * inv;
            *o = t;
            if t > m {
                m = t;
            }
        }
        let mut s = 0.0;
        for o in out.iter_mut() {
            *o = (*o - m).exp();
            s += *o;
        }
        let scale = self.grid.mu()[i] / s;
        gb.iter_mut().for_each(|v| *v = 0.0);
        for (j, o) in out.iter_mut().enumerate() {
            *o *= scale;
            for (k, v) in gb.iter_mut().enumerate() {
                *v -= *o * x[[j, k]];
            }
        }
        m + s.ln()
    }

    pub(crate) fn evaluate(&self, flat: &[f64]) -> Evaluation {
        let (nj, ni, nk) = (self.n_obs(), self.n_ranks(), self.n_cov());
        let psi = &flat[..nj];
        let b = &flat[nj..];
        let mut alpha = vec![0.0; ni * nj];
        // one slot per row even when N = 0, since chunk sizes must be positive
        let stride = nk.max(1);
        let mut gb_buf = vec![0.0; ni * stride];
        let mut lse = vec![0.0; ni];

        type Slot<'s> = (usize, ((&'s mut [f64], &'s mut [f64]), &'s mut f64));
        let body = |(i, ((row, gb), l)): Slot<'_>| {
            *l = self.row(i, psi, &b[i * nk..(i + 1) * nk], row, &mut gb[..nk]);
        };
        if ni * nj >= PAR_CELLS {
            alpha
                .par_chunks_mut(nj)
                .zip(gb_buf.par_chunks_mut(stride))
                .zip(lse.par_iter_mut())
                .enumerate()
                .for_each(body);
        } else {
            alpha
                .chunks_mut(nj)
                .zip(gb_buf.chunks_mut(stride))
                .zip(lse.iter_mut())
                .enumerate()
                .for_each(body);
        }
        let grad_b: Vec<f64> = if nk == stride { gb_buf } else { Vec::new() };

        let col = pairwise_col_sums(&alpha, ni, nj);
        let nu = self.data.nu();
        let mu = self.grid.mu();
        let grad_psi: Vec<f64> = (0..nj).map(|j| nu[j] - col[j]).collect();
        let weighted: Vec<f64> = (0..ni).map(|i| mu[i] * lse[i]).collect();
        let linear: Vec<f64> = (0..nj).map(|j| psi[j] * nu[j]).collect();
        let value = pairwise_sum(&linear) + self.epsilon * pairwise_sum(&weighted);
        Evaluation {
            value,
            grad_psi,
            grad_b,
        }
    }

    /// Coupling `alpha` for the flat point, `I x J` row-major.
    fn coupling_flat(&self, flat: &[f64]) -> Vec<f64> {
        let (nj, ni, nk) = (self.n_obs(), self.n_ranks(), self.n_cov());
        let mut alpha = vec![0.0; ni * nj];
        let mut gb = vec![0.0; nk];
        for (i, row) in alpha.chunks_mut(nj).enumerate() {
            self.row(i, &flat[..nj], &flat[nj + i * nk..nj + (i + 1) * nk], row, &mut gb);
        }
        alpha
    }
}

impl Objective for DualProblem<'_> {
    fn dim(&self) -> usize {
        self.n_obs() + self.n_ranks() * self.n_cov()
    }

    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let e = self.evaluate(x);
        let nj = self.n_obs();
        grad[..nj].copy_from_slice(&e.grad_psi);
        grad[nj..].copy_from_slice(&e.grad_b);
        e.value
    }
}

/// Sum with a fixed pairwise reduction tree.
pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Column sums of a row-major `rows x cols` buffer with a fixed pairwise tree
/// over rows; independent of the number of worker threads.
fn pairwise_col_sums(buf: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    if rows <= 8 {
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(&buf[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        return out;
    }
    let mid = rows / 2;
    let mut a = pairwise_col_sums(&buf[..mid * cols], mid, cols);
    let b = pairwise_col_sums(&buf[mid * cols..], rows - mid, cols);
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
    a
}

fn check_finite(dv: &DualVariables) -> Result<()> {
    if dv.is_finite() {
        Ok(())
    } else {
        Err(VqrError::NonFinite("dual variables"))
    }
}

pub fn dual_objective(dv: &DualVariables, data: &Dataset, grid: &RankGrid, epsilon: f64) -> Result<f64> {
    check_shapes(dv, data, grid)?;
    check_finite(dv)?;
    let p = DualProblem::new(data, grid, epsilon);
    Ok(p.evaluate(&dv.to_flat()).value)
}

/// `(dJ/dpsi, dJ/db)` with `dJ/db` shaped `I x N`.
pub fn dual_gradient(
    dv: &DualVariables,
    data: &Dataset,
    grid: &RankGrid,
    epsilon: f64,
) -> Result<(Array1<f64>, Array2<f64>)> {
    check_shapes(dv, data, grid)?;
    check_finite(dv)?;
    let p = DualProblem::new(data, grid, epsilon);
    let e = p.evaluate(&dv.to_flat());
    let gb = Array2::from_shape_vec((grid.len(), data.n_covariates()), e.grad_b)
        .map_err(|e| VqrError::Shape(e.to_string()))?;
    Ok((Array1::from(e.grad_psi), gb))
}

/// Moves to the canonical gauge: `b_1 = 0` and `sum_ij exp(theta_ij) = 1`.
///
/// The `b` translation leaves `J` unchanged only for centered covariates.
pub fn normalize(dv: &DualVariables, data: &Dataset, grid: &RankGrid, epsilon: f64) -> Result<DualVariables> {
    check_shapes(dv, data, grid)?;
    let mut out = dv.clone();
    if out.gauge.b_shift.len() != data.n_covariates() {
        out.gauge.b_shift = vec![0.0; data.n_covariates()];
    }
    if !grid.is_empty() && data.n_covariates() > 0 {
        let b1 = out.b.row(0).to_owned();
        for mut row in out.b.axis_iter_mut(Axis(0)) {
            row -= &b1;
        }
        // b_1 is pinned to exactly zero
        out.b.row_mut(0).fill(0.0);
        out.psi += &data.x().dot(&b1);
        for (s, v) in out.gauge.b_shift.iter_mut().zip(b1.iter()) {
            *s += v;
        }
    }
    let t = theta(&out, data, grid, epsilon)?;
    let m = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = t.iter().map(|v| (v - m).exp()).sum();
    let lambda = epsilon * (m + s.ln());
    out.psi += lambda;
    out.gauge.psi_shift += lambda;
    out.gauge.normalized = true;
    Ok(out)
}

/// `alpha_ij = mu_i exp(theta_ij) / sum_k exp(theta_ik)` with residuals.
pub fn extract_coupling(dv: &DualVariables, data: &Dataset, grid: &RankGrid, epsilon: f64) -> Result<Coupling> {
    check_finite(dv)?;
    let t = theta(dv, data, grid, epsilon)?;
    let mu = grid.mu();
    let mut alpha = t;
    for (i, mut row) in alpha.axis_iter_mut(Axis(0)).enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| mu[i] * v / s);
    }
    Ok(coupling_from_alpha(alpha, data, grid))
}

pub(crate) fn coupling_from_alpha(alpha: Array2<f64>, data: &Dataset, grid: &RankGrid) -> Coupling {
    let row_residual = alpha.sum_axis(Axis(1)) - grid.mu();
    let col_residual = alpha.sum_axis(Axis(0)) - data.nu();
    let mi_residual = alpha.dot(&data.x());
    Coupling {
        alpha,
        row_residual,
        col_residual,
        mi_residual,
    }
}

/// `sum_ij pi_ij u_i.y_j - eps sum_ij pi_ij log pi_ij`, with `0 log 0 = 0`.
pub fn primal_value(c: &Coupling, grid: &RankGrid, data: &Dataset, epsilon: f64) -> f64 {
    let gain = gain_matrix(data, grid);
    let mut linear = 0.0;
    let mut entropy = 0.0;
    for (p, g) in c.alpha.iter().zip(gain.iter()) {
        if *p > 0.0 {
            linear += p * g;
            entropy += p * p.ln();
        }
    }
    linear - epsilon * entropy
}

/// Shannon entropy `-sum mu log mu`.
pub fn entropy(w: ArrayView1<'_, f64>) -> f64 {
    -w.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// `phi_i = max_j (u_i.y_j - b_i.x_j - psi_j)`.
pub fn hard_potential(dv: &DualVariables, data: &Dataset, grid: &RankGrid) -> Result<Array1<f64>> {
    let a = theta(dv, data, grid, 1.0)?;
    Ok(a.map_axis(Axis(1), |r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)))
}

/// `phi_i = eps log sum_j exp((u_i.y_j - b_i.x_j - psi_j) / eps)`.
pub fn soft_potential(dv: &DualVariables, data: &Dataset, grid: &RankGrid, epsilon: f64) -> Result<Array1<f64>> {
    let t = theta(dv, data, grid, epsilon)?;
    Ok(t.map_axis(Axis(1), |r| {
        let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        epsilon * (m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
    }))
}

pub fn potential(
    dv: &DualVariables,
    data: &Dataset,
    grid: &RankGrid,
    epsilon: f64,
    mode: PhiMode,
) -> Result<Array1<f64>> {
    match mode {
        PhiMode::Soft => soft_potential(dv, data, grid, epsilon),
        PhiMode::Hard => hard_potential(dv, data, grid),
    }
}

fn ensure_centered(data: &Dataset) -> Result<()> {
    let x = data.x();
    let nu = data.nu();
    for (k, col) in x.axis_iter(Axis(1)).enumerate() {
        let scale = col.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let mean: f64 = col.iter().zip(nu.iter()).map(|(a, w)| a * w).sum();
        if mean.abs() > 1e-9 * scale {
            return Err(VqrError::InvalidInput(format!(
                "covariate column {k} is not centered (weighted mean {mean:e})"
            )));
        }
    }
    Ok(())
}

fn initial_step(data: &Dataset, grid: &RankGrid, epsilon: f64) -> f64 {
    let nu_max = data.nu().iter().copied().fold(0.0, f64::max);
    let mu_max = grid.mu().iter().copied().fold(0.0, f64::max);
    let x2 = data.x().rows().into_iter().map(|r| r.dot(&r)).fold(0.0, f64::max);
    epsilon / nu_max.max(mu_max * x2).max(f64::MIN_POSITIVE)
}

/// Minimizes the smoothed dual from `psi = 0, b = 0`.
pub fn solve(data: &Dataset, grid: &RankGrid, cfg: &SolverConfig) -> Result<Solution> {
    cfg.validate()?;
    ensure_centered(data)?;
    let dv0 = DualVariables::zeros(data.n_obs(), grid.len(), data.n_covariates());
    check_shapes(&dv0, data, grid)?;
    let start = Instant::now();
    let problem = DualProblem::new(data, grid, cfg.epsilon);

    let step = match cfg.step_mode {
        StepMode::Backtracking => StepRule::Backtracking {
            initial: initial_step(data, grid, cfg.epsilon),
            armijo: cfg.armijo,
            grow: 1.25,
        },
        StepMode::Fixed => {
            let l = accel::estimate_lipschitz(&problem, &dv0.to_flat(), 50);
            StepRule::Fixed {
                step: if l > 0.0 { 1.0 / l } else { 1.0 },
            }
        }
    };
    let acfg = AccelConfig {
        max_iter: cfg.max_iter,
        step,
        restart: cfg.restart == Restart::FunctionValue,
    };

    let tol = cfg.tol;
    let outcome = match cfg.stop_rule {
        StopRule::Gradient => accel::minimize(&problem, dv0.to_flat(), &acfg, |_, g| accel::inf_norm(g) <= tol),
        StopRule::PlanChange => {
            let mut prev: Option<Vec<f64>> = None;
            accel::minimize(&problem, dv0.to_flat(), &acfg, |x, _| {
                let cur = problem.coupling_flat(x);
                let done = prev
                    .as_ref()
                    .is_some_and(|p| p.iter().zip(&cur).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() <= tol);
                prev = Some(cur);
                done
            })
        }
    };

    let raw = DualVariables::from_flat(&outcome.x, data.n_obs(), grid.len(), data.n_covariates());
    let dual = normalize(&raw, data, grid, cfg.epsilon)?;
    let coupling = extract_coupling(&dual, data, grid, cfg.epsilon)?;
    let objective = dual_objective(&dual, data, grid, cfg.epsilon)?;
    let dual_value = objective + cfg.epsilon * entropy(grid.mu());
    let primal = primal_value(&coupling, grid, data, cfg.epsilon);
    let gap = (dual_value - primal).abs();
    let report = SolveReport {
        iterations: outcome.iterations,
        evaluations: outcome.evaluations,
        restarts: outcome.restarts,
        converged: outcome.converged,
        epsilon: cfg.epsilon,
        objective,
        dual_value,
        primal_value: primal,
        duality_gap: gap,
        relative_gap: gap / dual_value.abs().max(f64::MIN_POSITIVE),
        grad_norm: accel::inf_norm(&outcome.grad),
        col_residual: coupling.col_residual_norm(),
        mi_residual: coupling.mi_residual_norm(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        objective_trace: outcome.history,
    };
    log::debug!(
        "rvqr solve: eps={} iters={} grad={:.3e} gap={:.3e}",
        cfg.epsilon,
        report.iterations,
        report.grad_norm,
        report.relative_gap
    );
    if outcome.converged {
        Ok(Solution { dual, coupling, report })
    } else {
        Err(VqrError::NotConverged(Box::new(Unconverged { dual, coupling, report })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{center_covariates, make_rank_grid, NodePlacement};
    use crate::oracles::{random_dual, random_instance};
    use ndarray::array;

    fn single() -> (Dataset, RankGrid) {
        let data = Dataset::new(array![[0.0]], array![[2.0]]).unwrap();
        let grid = RankGrid::from_nodes(array![[0.5]], array![1.0]).unwrap();
        (data, grid)
    }

    #[test]
    fn theta_examples() {
        let (data, grid) = single();
        let mut dv = DualVariables::zeros(1, 1, 1);
        dv.psi[0] = 1.0;
        assert_eq!(theta(&dv, &data, &grid, 0.1).unwrap()[[0, 0]], 0.0);

        let (data, grid) = random_instance(1, 3, 4, 2, 1).unwrap();
        let dv = DualVariables::zeros(4, 3, 2);
        let t0 = theta(&dv, &data, &grid, 0.5).unwrap();
        assert_eq!(t0, gain_matrix(&data, &grid) / 0.5);
        let mut shifted = random_dual(2, 4, 3, 2);
        let before = theta(&shifted, &data, &grid, 0.5).unwrap();
        shifted.psi += 0.5;
        let after = theta(&shifted, &data, &grid, 0.5).unwrap();
        for (a, b) in before.iter().zip(after.iter()) {
            assert!((a - b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_atom_objective_is_u_times_y() {
        let (data, grid) = single();
        for psi in [-3.0, 0.0, 1.0, 7.5] {
            let mut dv = DualVariables::zeros(1, 1, 1);
            dv.psi[0] = psi;
            let j = dual_objective(&dv, &data, &grid, 0.1).unwrap();
            assert!((j - 1.0).abs() < 1e-12, "psi = {psi}: {j}");
        }
    }

    #[test]
    fn rejects_nan_and_bad_shapes() {
        let (data, grid) = single();
        let mut dv = DualVariables::zeros(1, 1, 1);
        dv.psi[0] = f64::NAN;
        assert!(matches!(
            dual_objective(&dv, &data, &grid, 0.1),
            Err(VqrError::NonFinite(_))
        ));
        assert!(matches!(
            dual_objective(&DualVariables::zeros(2, 1, 1), &data, &grid, 0.1),
            Err(VqrError::Shape(_))
        ));
    }

    #[test]
    fn no_overflow_at_small_epsilon_with_large_y() {
        let data = center_covariates(&Dataset::new(array![[0.0], [1.0]], array![[1e4], [-1e4]]).unwrap());
        let grid = make_rank_grid(1, 3, NodePlacement::RightEndpoint).unwrap();
        let dv = DualVariables::zeros(2, 3, 1);
        assert!(dual_objective(&dv, &data, &grid, 0.05).unwrap().is_finite());
        let c = extract_coupling(&dv, &data, &grid, 0.05).unwrap();
        assert!(c.alpha.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn uniform_softmax_gradient() {
        let data = center_covariates(&Dataset::new(Array2::zeros((4, 1)), Array2::from_elem((4, 1), 3.0)).unwrap());
        let grid = make_rank_grid(1, 5, NodePlacement::RightEndpoint).unwrap();
        let dv = DualVariables::zeros(4, 5, 1);
        // theta differs across i but is constant in j, so each row softmax is uniform
        let (gp, _) = dual_gradient(&dv, &data, &grid, 0.3).unwrap();
        for g in gp.iter() {
            assert!(g.abs() < 1e-15);
        }
        let c = extract_coupling(&dv, &data, &grid, 0.3).unwrap();
        for a in c.alpha.iter() {
            assert!((a - 1.0 / 20.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_equals_coupling_residuals() {
        let (data, grid) = random_instance(5, 6, 9, 2, 2).unwrap();
        let dv = random_dual(5, 9, 6, 2);
        let (gp, gb) = dual_gradient(&dv, &data, &grid, 0.4).unwrap();
        let c = extract_coupling(&dv, &data, &grid, 0.4).unwrap();
        for (g, r) in gp.iter().zip(c.col_residual.iter()) {
            assert!((g + r).abs() < 1e-12);
        }
        for (g, r) in gb.iter().zip(c.mi_residual.iter()) {
            assert!((g + r).abs() < 1e-12);
        }
        assert!(gp.sum().abs() < 1e-12);
        assert!(c.row_residual_norm() < 1e-12);
    }

    #[test]
    fn large_epsilon_flattens_rows() {
        let (data, grid) = random_instance(6, 3, 5, 1, 1).unwrap();
        let c = extract_coupling(&DualVariables::zeros(5, 3, 1), &data, &grid, 1e8).unwrap();
        for (i, row) in c.alpha.outer_iter().enumerate() {
            for a in row {
                assert!((a - grid.mu()[i] / 5.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gauge_invariance() {
        let (data, grid) = random_instance(8, 7, 12, 2, 2).unwrap();
        let dv = random_dual(8, 12, 7, 2);
        let base = dual_objective(&dv, &data, &grid, 0.5).unwrap();
        let mut moved = dv.clone();
        moved.psi += 3.7;
        let c = array![0.4, -2.2];
        for mut r in moved.b.outer_iter_mut() {
            r += &c;
        }
        moved.psi = &moved.psi - &data.x().dot(&c);
        let after = dual_objective(&moved, &data, &grid, 0.5).unwrap();
        assert!((after - base).abs() <= 1e-12 * base.abs());
    }

    #[test]
    fn normalize_pins_gauge_and_keeps_value() {
        let (data, grid) = random_instance(9, 5, 8, 2, 1).unwrap();
        let mut dv = random_dual(9, 8, 5, 2);
        dv.b.row_mut(0).fill(1.5);
        let n = normalize(&dv, &data, &grid, 0.3).unwrap();
        assert!(n.b.row(0).iter().all(|&v| v == 0.0));
        let t = theta(&n, &data, &grid, 0.3).unwrap();
        assert!((t.mapv(f64::exp).sum() - 1.0).abs() < 1e-8);
        let a = dual_objective(&dv, &data, &grid, 0.3).unwrap();
        let b = dual_objective(&n, &data, &grid, 0.3).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        let again = normalize(&n, &data, &grid, 0.3).unwrap();
        for (p, q) in again.psi.iter().zip(n.psi.iter()) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn convexity_along_segment() {
        let (data, grid) = random_instance(10, 6, 10, 2, 2).unwrap();
        let a = random_dual(10, 10, 6, 2);
        let b = random_dual(11, 10, 6, 2);
        let f = |s: f64| {
            let mut d = a.clone();
            d.psi = &a.psi * (1.0 - s) + &b.psi * s;
            d.b = &a.b * (1.0 - s) + &b.b * s;
            dual_objective(&d, &data, &grid, 0.2).unwrap()
        };
        let vals: Vec<f64> = (0..=10).map(|k| f(k as f64 / 10.0)).collect();
        for k in 1..10 {
            let chord = vals[0] * (1.0 - k as f64 / 10.0) + vals[10] * (k as f64 / 10.0);
            assert!(vals[k] <= chord + 1e-12);
        }
        assert!(vals[5] <= 0.5 * (vals[0] + vals[10]) + 1e-12);
    }

    #[test]
    fn primal_value_examples() {
        let (data, grid) = single();
        let c = coupling_from_alpha(array![[1.0]], &data, &grid);
        assert!((primal_value(&c, &grid, &data, 0.1) - 1.0).abs() < 1e-15);

        let data = Dataset::new(Array2::zeros((2, 0)), Array2::zeros((2, 1))).unwrap();
        let grid = make_rank_grid(1, 2, NodePlacement::RightEndpoint).unwrap();
        let c = coupling_from_alpha(Array2::from_elem((2, 2), 0.25), &data, &grid);
        assert!((primal_value(&c, &grid, &data, 1.0) - 4f64.ln()).abs() < 1e-15);
        // the smoothed dual sits eps H(mu) = log 2 below it
        let j = dual_objective(&DualVariables::zeros(2, 2, 0), &data, &grid, 1.0).unwrap();
        assert!((j - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn potentials_sandwich() {
        let (data, grid) = random_instance(12, 6, 9, 2, 2).unwrap();
        let dv = random_dual(12, 9, 6, 2);
        let eps = 0.3;
        let s = soft_potential(&dv, &data, &grid, eps).unwrap();
        let h = hard_potential(&dv, &data, &grid).unwrap();
        for (a, b) in s.iter().zip(h.iter()) {
            assert!(*a >= *b - 1e-12 && *b >= *a - eps * 9f64.ln() - 1e-12);
        }

        let (data, grid) = single();
        let dv = DualVariables::zeros(1, 1, 1);
        assert!(
            (soft_potential(&dv, &data, &grid, 0.7).unwrap()[0] - hard_potential(&dv, &data, &grid).unwrap()[0]).abs()
                < 1e-15
        );

        let data = Dataset::new(Array2::zeros((2, 0)), array![[1.0], [1.0]]).unwrap();
        let grid = RankGrid::from_nodes(array![[0.5]], array![1.0]).unwrap();
        let dv = DualVariables::zeros(2, 1, 0);
        let gap = soft_potential(&dv, &data, &grid, 1.0).unwrap()[0] - hard_potential(&dv, &data, &grid).unwrap()[0];
        assert!((gap - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn solve_single_cell() {
        let (data, grid) = single();
        let data = center_covariates(&data);
        let s = solve(&data, &grid, &SolverConfig::default()).unwrap();
        assert!(s.report.iterations <= 2);
        assert!((s.coupling.alpha[[0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn solve_random_instance_closes_gap() {
        let (data, grid) = random_instance(13, 20, 50, 2, 1).unwrap();
        let s = solve(&data, &grid, &SolverConfig::default().with_epsilon(0.1)).unwrap();
        let r = &s.report;
        assert!(r.converged && r.grad_norm <= 1e-6);
        assert!(r.col_residual <= 1e-6 && r.mi_residual <= 1e-6);
        // weak duality up to the residual infeasibility of the coupling
        assert!(r.primal_value <= r.dual_value + 1e-6 * r.dual_value.abs());
        assert!(r.duality_gap <= 1e-8_f64.max(1e-6 * r.dual_value.abs()), "{r:?}");
        assert!(r
            .objective_trace
            .windows(2)
            .all(|w| w[1] <= w[0] + 8.0 * f64::EPSILON * w[0].abs()));
        assert!(s.dual.b.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn solve_errors() {
        let (data, grid) = random_instance(14, 4, 6, 1, 1).unwrap();
        assert!(matches!(
            solve(&data, &grid, &SolverConfig::default().with_epsilon(0.0)),
            Err(VqrError::Config(_))
        ));
        match solve(
            &data,
            &grid,
            &SolverConfig::default()
                .with_epsilon(0.01)
                .with_tol(1e-14)
                .with_max_iter(3),
        ) {
            Err(VqrError::NotConverged(u)) => {
                assert_eq!(u.report.iterations, 3);
                assert!(!u.report.converged);
            }
            other => panic!("{other:?}"),
        }
        let raw = Dataset::new(array![[1.0], [2.0]], array![[0.0], [1.0]]).unwrap();
        let g2 = make_rank_grid(1, 2, NodePlacement::RightEndpoint).unwrap();
        assert!(matches!(
            solve(&raw, &g2, &SolverConfig::default()),
            Err(VqrError::InvalidInput(_))
        ));
    }

    #[test]
    fn fixed_step_and_plan_change_modes_converge() {
        let (data, grid) = random_instance(15, 8, 20, 1, 1).unwrap();
        let fixed = SolverConfig {
            step_mode: StepMode::Fixed,
            ..SolverConfig::default().with_epsilon(0.2)
        };
        assert!(solve(&data, &grid, &fixed).is_ok());
        let plan = SolverConfig {
            stop_rule: StopRule::PlanChange,
            ..SolverConfig::default().with_epsilon(0.2).with_tol(1e-10)
        };
        assert!(solve(&data, &grid, &plan).is_ok());
        let no_restart = SolverConfig {
            restart: Restart::None,
            ..SolverConfig::default().with_epsilon(0.2)
        };
        assert!(solve(&data, &grid, &no_restart).is_ok());
    }

    #[test]
    fn parallel_evaluation_is_deterministic() {
        // 200 x 100 cells crosses the parallel threshold
        let (data, grid) = random_instance(16, 200, 100, 2, 1).unwrap();
        let dv = random_dual(16, 100, 200, 2);
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = serial.install(|| dual_gradient(&dv, &data, &grid, 0.2).unwrap());
        let b = many.install(|| dual_gradient(&dv, &data, &grid, 0.2).unwrap());
        assert_eq!(a, b);
        let va = serial.install(|| dual_objective(&dv, &data, &grid, 0.2).unwrap());
        let vb = many.install(|| dual_objective(&dv, &data, &grid, 0.2).unwrap());
        assert_eq!(va.to_bits(), vb.to_bits());
    }

    #[test]
    fn coupling_csv_has_triples_above_threshold() {
        let (data, grid) = single();
        let c = coupling_from_alpha(array![[1.0]], &data, &grid);
        let mut buf = Vec::new();
        c.write_csv(&mut buf, 1e-12).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "i,j,alpha\n0,0,1e0\n");
    }
}
