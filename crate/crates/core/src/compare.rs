//! Relative-error tables across regularization strengths for scalar responses:
//! regularized quantiles against t-by-t quantile regression, and soft against
//! hard potentials.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classical_qr::{self, QrConfig, QrFit};
use crate::error::{Result, VqrError};
use crate::measures::{center_covariates, make_rank_grid, Dataset, NodePlacement};
use crate::model::FittedModel;
use crate::quantile::{EtaRule, QuantileModel};
use crate::rvqr::{self, PhiMode, SolveReport, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub epsilons: Vec<f64>,
    /// Rank nodes `u_i = i/n`.
    pub n_grid: usize,
    /// Covariate probability levels at which quantile curves are compared.
    pub probe_levels: Vec<f64>,
    pub eta: EtaRule,
    /// Min-max scale the response before fitting; quantiles are reported
    /// in original units either way.
    pub scale_y: bool,
    pub solver: SolverConfig,
    pub qr: QrConfig,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            epsilons: vec![0.05, 0.1, 0.5, 1.0],
            n_grid: 20,
            probe_levels: vec![0.1, 0.3, 0.6, 0.9],
            eta: EtaRule::default(),
            scale_y: false,
            solver: SolverConfig::default(),
            qr: QrConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub epsilons: Vec<f64>,
    pub probe_levels: Vec<f64>,
    /// Probe covariates in original units.
    pub probes: Vec<Vec<f64>>,
    /// `|Q_QR - Q_VQR|_2 / |Q_QR|_2`, indexed `[probe][epsilon]`.
    pub qr_vs_vqr: Vec<Vec<f64>>,
    /// `|Q_soft - Q_hard|_2 / |Q_soft|_2`, indexed `[probe][epsilon]`.
    pub soft_vs_hard: Vec<Vec<f64>>,
    pub reports: Vec<SolveReport>,
}

fn rel_l2(reference: &[f64], other: &[f64]) -> f64 {
    let num: f64 = reference.iter().zip(other).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = reference.iter().map(|a| a * a).sum();
    (num / den).sqrt()
}

/// Fits at `epsilon` on a centered dataset; a run that hits the iteration
/// cap is kept (and flagged in its report) rather than discarded.
pub fn fit_model(
    data: &Dataset,
    n_grid: usize,
    dim: usize,
    solver: &SolverConfig,
    epsilon: f64,
) -> Result<FittedModel> {
    let grid = make_rank_grid(dim, n_grid, NodePlacement::RightEndpoint)?;
    let cfg = SolverConfig {
        epsilon,
        ..solver.clone()
    };
    let (dual, report) = match rvqr::solve(data, &grid, &cfg) {
        Ok(s) => (s.dual, s.report),
        Err(VqrError::NotConverged(u)) => {
            log::warn!(
                "eps = {epsilon}: no convergence after {} iterations (gradient {:.3e})",
                u.report.iterations,
                u.report.grad_norm
            );
            (u.dual, u.report)
        }
        Err(e) => return Err(e),
    };
    Ok(FittedModel {
        epsilon,
        phi_mode: cfg.phi_mode,
        grid,
        dual,
        report,
        data: data.clone(),
    })
}

/// Centers covariates and, when `scale_y` is set, rescales the response to
/// `[0, 1]` (unless it already carries a scaling).
pub fn prepare(data: &Dataset, scale_y: bool) -> Dataset {
    let c = center_covariates(data);
    if !scale_y || c.y_scaling().is_some() {
        c
    } else {
        c.min_max_scale_y()
    }
}

fn unscaled(m: &QuantileModel, mut q: Vec<f64>) -> Vec<f64> {
    if let Some(s) = m.data().y_scaling() {
        s.unscale(&mut q);
    }
    q
}

/// Both tables for a scalar-response dataset given in original units.
///
/// Ranks `u_i = i/n` for `i < n` are compared against quantile regression at
/// `t = u_i`; the last node `u = 1` has no classical counterpart.
pub fn compare_qr(raw: &Dataset, cfg: &CompareConfig) -> Result<CompareTable> {
    if raw.dim() != 1 {
        return Err(VqrError::Unsupported(format!(
            "comparison with quantile regression needs d = 1, got d = {}",
            raw.dim()
        )));
    }
    if cfg.epsilons.is_empty() || cfg.probe_levels.is_empty() {
        return Err(VqrError::Config("need at least one epsilon and one probe level".into()));
    }
    let n = cfg.n_grid;
    if n < 2 {
        return Err(VqrError::InvalidGrid(format!("need at least 2 nodes, got {n}")));
    }
    let ranks: Vec<usize> = (0..n - 1).collect();
    let levels: Vec<f64> = ranks.iter().map(|&i| (i + 1) as f64 / n as f64).collect();

    // quantile regression runs on the raw responses with centered covariates
    let qr_data = center_covariates(raw);
    let fits: Vec<QrFit> = levels
        .par_iter()
        .map(|&t| match classical_qr::fit_qr_t(&qr_data, t, &cfg.qr) {
            Ok(f) => Ok(f),
            Err(VqrError::QrNotConverged(f)) => {
                log::warn!("quantile regression at t = {t} stopped at the iteration cap");
                Ok(*f)
            }
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;

    let probes: Vec<Vec<f64>> = cfg
        .probe_levels
        .iter()
        .map(|&l| classical_qr::covariate_quantile(raw, l))
        .collect();
    let x_mean = qr_data.x_mean().to_vec();
    let q_qr: Vec<Vec<f64>> = probes
        .iter()
        .map(|p| fits.iter().map(|f| f.predict(p, &x_mean)).collect())
        .collect();

    let data = prepare(raw, cfg.scale_y);
    let np = probes.len();
    let mut qr_vs_vqr = vec![Vec::with_capacity(cfg.epsilons.len()); np];
    let mut soft_vs_hard = vec![Vec::with_capacity(cfg.epsilons.len()); np];
    let mut reports = Vec::with_capacity(cfg.epsilons.len());
    for &eps in &cfg.epsilons {
        let fitted = fit_model(&data, n, 1, &cfg.solver, eps)?;
        let m = fitted.quantile_model()?;
        for (p, probe) in probes.iter().enumerate() {
            let eta = m.eta_for(probe, cfg.eta)?;
            let mut q_vqr = Vec::with_capacity(ranks.len());
            for &i in &ranks {
                q_vqr.push(unscaled(&m, m.ball_conditional_quantile(probe, eta, i)?)[0]);
            }
            qr_vs_vqr[p].push(rel_l2(&q_qr[p], &q_vqr));

            let soft = m.potential_quantiles(probe, PhiMode::Soft)?;
            let hard = m.potential_quantiles(probe, PhiMode::Hard)?;
            let qs: Vec<f64> = ranks.iter().map(|&i| unscaled(&m, vec![soft[[i, 0]]])[0]).collect();
            let qh: Vec<f64> = ranks.iter().map(|&i| unscaled(&m, vec![hard[[i, 0]]])[0]).collect();
            soft_vs_hard[p].push(rel_l2(&qs, &qh));
        }
        reports.push(fitted.report);
    }

    Ok(CompareTable {
        epsilons: cfg.epsilons.clone(),
        probe_levels: cfg.probe_levels.clone(),
        probes,
        qr_vs_vqr,
        soft_vs_hard,
        reports,
    })
}

impl CompareTable {
    /// One row per (metric, probe), one column per epsilon.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["metric".to_string(), "probe".to_string()];
        header.extend(self.epsilons.iter().map(|e| format!("eps={e}")));
        wr.write_record(&header)?;
        for (name, rows) in [("qr_vs_vqr", &self.qr_vs_vqr), ("soft_vs_hard", &self.soft_vs_hard)] {
            for (level, row) in self.probe_levels.iter().zip(rows) {
                let mut rec = vec![name.to_string(), format!("q{}", (level * 100.0).round())];
                rec.extend(row.iter().map(|v| format!("{v:.3e}")));
                wr.write_record(&rec)?;
            }
        }
        wr.flush().map_err(|e| VqrError::Io {
            path: "<table>".into(),
            source: e,
        })?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SynthConfig};

    #[test]
    fn relative_l2() {
        assert_eq!(rel_l2(&[3.0, 4.0], &[3.0, 4.0]), 0.0);
        assert!((rel_l2(&[3.0, 4.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_vector_response() {
        let d = synth::generate(&SynthConfig {
            dim: 2,
            n_obs: 20,
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(
            compare_qr(&d, &CompareConfig::default()),
            Err(VqrError::Unsupported(_))
        ));
    }

    #[test]
    fn noiseless_line_agrees_with_quantile_regression() {
        // y = 1 + 2x exactly: every conditional quantile is the line
        let d = synth::generate(&SynthConfig {
            n_obs: 200,
            alpha: synth::Linear { a: 1.0, b: 0.0 },
            beta: synth::Linear { a: 2.0, b: 0.0 },
            ..Default::default()
        })
        .unwrap();
        let cfg = CompareConfig {
            epsilons: vec![0.05],
            n_grid: 10,
            ..Default::default()
        };
        let t = compare_qr(&d, &cfg).unwrap();
        for row in &t.qr_vs_vqr {
            assert!(row[0] <= 1e-2, "{row:?}");
        }
    }
}
