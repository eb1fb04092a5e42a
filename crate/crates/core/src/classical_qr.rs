//! Classical t-by-t quantile regression (Koenker–Bassett) for scalar responses.
//!
//! The fit minimizes `E[(Y - alpha - beta.X)^+] + (1 - t) alpha` over centered
//! covariates. The kink of the positive part is replaced by a quadratic of
//! width `h` so the shared accelerated engine applies; the smoothed optimum is
//! then polished to an exact vertex (a fit through `N + 1` observations) when
//! one nearby has no larger exact loss. Reported losses use the exact objective.

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accel::{self, AccelConfig, Objective, StepRule};
use crate::error::{Result, VqrError};
use crate::measures::Dataset;

/// Check loss `t z^- + (1 - t) z^+`.
///
/// Under this convention `E rho_t(Y - a)` is minimized at the `(1 - t)`
/// quantile; [`fit_qr_t`] uses the positive-part form, which targets `t`.
pub fn pinball(z: f64, t: f64) -> f64 {
    t * (-z).max(0.0) + (1.0 - t) * z.max(0.0)
}

/// `inf { a : F(a) > t }` for the empirical CDF of `y` (uniform weights).
///
/// Exactly the right-continuous generalized inverse: at `t = k/n` this returns
/// the `(k+1)`-th order statistic, unlike interpolating definitions.
pub fn empirical_quantile(y: &[f64], t: f64) -> f64 {
    assert!(!y.is_empty(), "empirical_quantile of an empty sample");
    let mut s = y.to_vec();
    s.sort_by(f64::total_cmp);
    sorted_quantile(&s, t)
}

pub(crate) fn sorted_quantile(s: &[f64], t: f64) -> f64 {
    let n = s.len() as f64;
    // smallest k with (k + 1)/n > t
    let mut lo = 0;
    let mut hi = s.len() - 1;
    while lo < hi {
        let mid = (lo + hi) / 2;
        if (mid as f64 + 1.0) / n > t {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    s[lo]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QrConfig {
    /// Gradient inf-norm tolerance on the smoothed objective.
    pub tol: f64,
    pub max_iter: usize,
    /// Smoothing width relative to the response range.
    pub smoothing: f64,
}

impl Default for QrConfig {
    fn default() -> Self {
        QrConfig {
            tol: 1e-9,
            max_iter: 200_000,
            smoothing: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QrFit {
    pub t: f64,
    /// Intercept in centered covariates.
    pub alpha: f64,
    pub beta: Vec<f64>,
    /// Exact (unsmoothed) objective at `(alpha, beta)`.
    pub loss: f64,
    pub iterations: usize,
    pub smoothing: f64,
    pub grad_norm: f64,
    pub warnings: Vec<String>,
}

impl QrFit {
    /// Fitted quantile at a covariate given in original units.
    pub fn predict(&self, x_raw: &[f64], x_mean: &[f64]) -> f64 {
        self.alpha
            + self
                .beta
                .iter()
                .zip(x_raw.iter().zip(x_mean))
                .map(|(b, (x, m))| b * (x - m))
                .sum::<f64>()
    }

    /// Intercept for uncentered covariates.
    pub fn raw_intercept(&self, x_mean: &[f64]) -> f64 {
        self.alpha - self.beta.iter().zip(x_mean).map(|(b, m)| b * m).sum::<f64>()
    }
}

/// `E[(Y - alpha - beta.X)^+] + (1 - t) alpha` on centered covariates.
pub fn kb_objective(data: &Dataset, t: f64, alpha: f64, beta: &[f64]) -> f64 {
    let x = data.x();
    let y = data.y();
    let nu = data.nu();
    let mut s = 0.0;
    for j in 0..data.n_obs() {
        let fit: f64 = alpha + beta.iter().enumerate().map(|(k, b)| b * x[[j, k]]).sum::<f64>();
        s += nu[j] * (y[[j, 0]] - fit).max(0.0);
    }
    s + (1.0 - t) * alpha
}

/// Smoothed objective over `(alpha, beta_active)` in standardized covariates.
struct SmoothedKb<'a> {
    y: Vec<f64>,
    nu: ndarray::ArrayView1<'a, f64>,
    /// `J x A` standardized active columns, row-major.
    z: Vec<f64>,
    active: usize,
    t: f64,
    h: f64,
}

impl Objective for SmoothedKb<'_> {
    fn dim(&self) -> usize {
        1 + self.active
    }

    fn eval(&self, p: &[f64], g: &mut [f64]) -> f64 {
        let a = self.active;
        g.iter_mut().for_each(|v| *v = 0.0);
        let mut val = 0.0;
        for (j, &yj) in self.y.iter().enumerate() {
            let zr = &self.z[j * a..(j + 1) * a];
            let fit = p[0] + zr.iter().zip(&p[1..]).map(|(z, b)| z * b).sum::<f64>();
            let r = yj - fit;
            let (s, ds) = if r <= 0.0 {
                (0.0, 0.0)
            } else if r < self.h {
                (r * r / (2.0 * self.h), r / self.h)
            } else {
                (r - self.h / 2.0, 1.0)
            };
            let w = self.nu[j];
            val += w * s;
            g[0] -= w * ds;
            for (k, z) in zr.iter().enumerate() {
                g[1 + k] -= w * ds * z;
            }
        }
        val += (1.0 - self.t) * p[0];
        g[0] += 1.0 - self.t;
        val
    }
}

impl SmoothedKb<'_> {
    fn residual(&self, j: usize, p: &[f64]) -> f64 {
        let a = self.active;
        let zr = &self.z[j * a..(j + 1) * a];
        self.y[j] - p[0] - zr.iter().zip(&p[1..]).map(|(z, b)| z * b).sum::<f64>()
    }

    fn exact(&self, p: &[f64]) -> f64 {
        let s: f64 = (0..self.y.len())
            .map(|j| self.nu[j] * self.residual(j, p).max(0.0))
            .sum();
        s + (1.0 - self.t) * p[0]
    }

    /// Best exact loss among fits interpolating `A + 1` of the observations
    /// closest to `p`; `None` if no candidate beats `p` itself.
    fn polish(&self, p: &[f64]) -> Option<Vec<f64>> {
        let m = self.active + 1;
        let mut order: Vec<usize> = (0..self.y.len()).collect();
        order.sort_by(|&i, &j| self.residual(i, p).abs().total_cmp(&self.residual(j, p).abs()));
        order.truncate((2 * m + 2).min(self.y.len()));
        if binomial(order.len(), m) > POLISH_MAX_BASES {
            return None;
        }
        let mut best = (self.exact(p), None);
        for_each_subset(order.len(), m, &mut |pick| {
            let rows: Vec<usize> = pick.iter().map(|&k| order[k]).collect();
            let mut mat = vec![0.0; m * m];
            let mut rhs = vec![0.0; m];
            for (r, &j) in rows.iter().enumerate() {
                mat[r * m] = 1.0;
                mat[r * m + 1..(r + 1) * m].copy_from_slice(&self.z[j * self.active..(j + 1) * self.active]);
                rhs[r] = self.y[j];
            }
            if let Some(q) = solve_dense(&mat, &rhs, m) {
                let v = self.exact(&q);
                if v < best.0 {
                    best = (v, Some(q));
                }
            }
        });
        best.1
    }
}

const POLISH_MAX_BASES: usize = 5000;

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

fn for_each_subset(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, f);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::with_capacity(k), f);
}

/// Solves a row-major `m x m` system; `None` when it is numerically singular.
fn solve_dense(a: &[f64], b: &[f64], m: usize) -> Option<Vec<f64>> {
    let mat = nalgebra::DMatrix::from_row_slice(m, m, a);
    let lu = mat.lu();
    let u = lu.u();
    let scale = u.amax().max(f64::MIN_POSITIVE);
    if (0..m).any(|k| u[(k, k)].abs() <= 1e-12 * scale) {
        return None;
    }
    lu.solve(&nalgebra::DVector::from_column_slice(b))
        .map(|x| x.as_slice().to_vec())
}

fn check_level(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(VqrError::Config(format!("quantile level must lie in (0, 1), got {t}")))
    }
}

/// Weighted generalized-inverse quantile.
fn weighted_quantile(y: &[f64], w: &[f64], t: f64) -> f64 {
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
    let mut acc = 0.0;
    for &j in &idx {
        acc += w[j];
        if acc > t {
            return y[j];
        }
    }
    y[*idx.last().expect("nonempty")]
}

/// Quantile regression at level `t` for a scalar response.
pub fn fit_qr_t(data: &Dataset, t: f64, cfg: &QrConfig) -> Result<QrFit> {
    check_level(t)?;
    if data.dim() != 1 {
        return Err(VqrError::Unsupported(format!(
            "classical quantile regression needs a scalar response, got d = {}",
            data.dim()
        )));
    }
    let x = data.x();
    let n_cov = data.n_covariates();
    let y: Vec<f64> = data.y().column(0).to_vec();
    let nu = data.nu();

    let mut warnings = Vec::new();
    let mut active = Vec::new();
    let mut scales = Vec::new();
    for (k, col) in x.axis_iter(Axis(1)).enumerate() {
        let mean: f64 = col.iter().zip(nu.iter()).map(|(v, w)| v * w).sum();
        let var: f64 = col.iter().zip(nu.iter()).map(|(v, w)| w * (v - mean).powi(2)).sum();
        let mag = col.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if var.sqrt() <= 1e-12 * mag.max(1.0) || mag == 0.0 {
            let msg = format!(
                "covariate `{}` is constant after centering; its slope is fixed at 0",
                data.x_names().get(k).map(String::as_str).unwrap_or("?")
            );
            log::warn!("{msg}");
            warnings.push(msg);
        } else {
            active.push(k);
            scales.push(var.sqrt());
        }
    }
    let a = active.len();
    let mut z = Vec::with_capacity(data.n_obs() * a);
    for j in 0..data.n_obs() {
        for (&k, &s) in active.iter().zip(&scales) {
            z.push(x[[j, k]] / s);
        }
    }

    let h = cfg.smoothing * data.y_scale().max(f64::MIN_POSITIVE.sqrt());
    let f = SmoothedKb {
        y: y.clone(),
        nu,
        z,
        active: a,
        t,
        h,
    };

    let mut p0 = vec![0.0; 1 + a];
    p0[0] = weighted_quantile(&y, nu.as_slice().expect("contiguous"), t);
    let acfg = AccelConfig {
        max_iter: cfg.max_iter,
        step: StepRule::Backtracking {
            initial: h,
            armijo: 0.5,
            grow: 1.25,
        },
        restart: true,
    };
    let tol = cfg.tol;
    let out = accel::minimize(&f, p0, &acfg, |_, g| accel::inf_norm(g) <= tol);
    let p = f.polish(&out.x).unwrap_or_else(|| out.x.clone());

    let mut beta = vec![0.0; n_cov];
    for ((&k, &s), b) in active.iter().zip(&scales).zip(&p[1..]) {
        beta[k] = b / s;
    }
    let alpha = p[0];
    let fit = QrFit {
        t,
        alpha,
        loss: kb_objective(data, t, alpha, &beta),
        beta,
        iterations: out.iterations,
        smoothing: h,
        grad_norm: accel::inf_norm(&out.grad),
        warnings,
    };
    if out.converged {
        Ok(fit)
    } else {
        Err(VqrError::QrNotConverged(Box::new(fit)))
    }
}

/// A probe covariate where the fitted quantile decreases between two levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    /// Probe in original covariate units.
    pub probe: Vec<f64>,
    /// Covariate quantile level defining the probe.
    pub probe_level: f64,
    pub t_lo: f64,
    pub t_hi: f64,
    pub q_lo: f64,
    pub q_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QrCurve {
    pub t_grid: Vec<f64>,
    pub fits: Vec<QrFit>,
    pub crossing_report: Vec<Crossing>,
}

/// Covariate probes at the observed deciles, per column, in original units.
pub fn decile_probes(data: &Dataset) -> Vec<(f64, Vec<f64>)> {
    let levels: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
    levels.into_iter().map(|l| (l, covariate_quantile(data, l))).collect()
}

/// Per-column empirical quantile of the covariates in original units.
pub fn covariate_quantile(data: &Dataset, level: f64) -> Vec<f64> {
    let m = data.x_mean();
    data.x()
        .axis_iter(Axis(1))
        .enumerate()
        .map(|(k, c)| empirical_quantile(&c.to_vec(), level) + m[k])
        .collect()
}

/// Independent fits over `t_grid` plus a crossing scan at the covariate deciles.
pub fn fit_qr_curve(data: &Dataset, t_grid: &[f64], cfg: &QrConfig) -> Result<QrCurve> {
    if t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(VqrError::Config("t grid must be strictly increasing".into()));
    }
    for &t in t_grid {
        check_level(t)?;
    }
    let fits = t_grid
        .par_iter()
        .map(|&t| fit_qr_t(data, t, cfg))
        .collect::<Result<Vec<_>>>()?;

    let x_mean = data.x_mean().to_vec();
    let mut crossing_report = Vec::new();
    for (level, probe) in decile_probes(data) {
        for w in fits.windows(2) {
            let q_lo = w[0].predict(&probe, &x_mean);
            let q_hi = w[1].predict(&probe, &x_mean);
            let slack = w[0].smoothing.max(w[1].smoothing);
            if q_hi < q_lo - slack {
                crossing_report.push(Crossing {
                    probe: probe.clone(),
                    probe_level: level,
                    t_lo: w[0].t,
                    t_hi: w[1].t,
                    q_lo,
                    q_hi,
                });
            }
        }
    }
    Ok(QrCurve {
        t_grid: t_grid.to_vec(),
        fits,
        crossing_report,
    })
}

impl QrCurve {
    /// Rows `(t, alpha, beta_1..beta_N, loss)`.
    pub fn write_csv<W: std::io::Write>(&self, w: W, x_names: &[String]) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string(), "alpha".to_string()];
        header.extend(x_names.iter().map(|n| format!("beta_{n}")));
        header.push("loss".into());
        wr.write_record(&header)?;
        for f in &self.fits {
            let mut rec = vec![f.t.to_string(), f.alpha.to_string()];
            rec.extend(f.beta.iter().map(|b| b.to_string()));
            rec.push(f.loss.to_string());
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(|e| VqrError::Io {
            path: "<qr curve>".into(),
            source: e,
        })?;
        Ok(())
    }
}
