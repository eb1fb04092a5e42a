//! Conditional vector quantiles read off a fitted coupling.
//!
//! `Q(x, u_i)` is the conditional mean of `Y` under the coupling given
//! `X = x` and `U = u_i`. Exact conditioning needs `x` to be an observed
//! covariate value; the ball estimator conditions on `|X - x| <= eta` instead.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VqrError};
use crate::measures::{Dataset, RankGrid};
use crate::rvqr::{self, Coupling, DualVariables, PhiMode};

/// Conditional masses below this are treated as zero.
pub const MASS_FLOOR: f64 = 1e-14;

/// Default ball radius: distance to the nearest observations holding this
/// fraction of the sample.
pub const DEFAULT_BALL_FRACTION: f64 = 0.05;

/// How the ball radius is chosen when none is given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaRule {
    Fixed(f64),
    /// Smallest radius whose ball holds at least this fraction of observations.
    Fraction(f64),
}

impl Default for EtaRule {
    fn default() -> Self {
        EtaRule::Fraction(DEFAULT_BALL_FRACTION)
    }
}

/// Observations sharing one covariate value.
#[derive(Debug, Clone)]
struct Group {
    x: Vec<f64>,
    members: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct QuantileModel {
    data: Dataset,
    grid: RankGrid,
    dual: DualVariables,
    epsilon: f64,
    coupling: Coupling,
    groups: Vec<Group>,
}

fn dist2(a: ArrayView1<'_, f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

impl QuantileModel {
    /// `data` must be the centered dataset the coupling was fitted on.
    pub fn new(data: Dataset, grid: RankGrid, dual: DualVariables, epsilon: f64, coupling: Coupling) -> Result<Self> {
        if coupling.alpha.dim() != (grid.len(), data.n_obs()) {
            return Err(VqrError::Shape(format!(
                "coupling is {:?}, expected {} x {}",
                coupling.alpha.dim(),
                grid.len(),
                data.n_obs()
            )));
        }
        let mut order: Vec<usize> = (0..data.n_obs()).collect();
        let x = data.x();
        order.sort_by(|&a, &b| {
            x.row(a)
                .iter()
                .zip(x.row(b).iter())
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut groups: Vec<Group> = Vec::new();
        for j in order {
            let row = x.row(j);
            match groups.last_mut() {
                Some(g) if row.iter().zip(&g.x).all(|(a, b)| a == b) => g.members.push(j),
                _ => groups.push(Group {
                    x: row.to_vec(),
                    members: vec![j],
                }),
            }
        }
        Ok(QuantileModel {
            data,
            grid,
            dual,
            epsilon,
            coupling,
            groups,
        })
    }

    /// Refits nothing: recomputes the coupling from the dual variables.
    pub fn from_dual(data: Dataset, grid: RankGrid, dual: DualVariables, epsilon: f64) -> Result<Self> {
        let coupling = rvqr::extract_coupling(&dual, &data, &grid, epsilon)?;
        Self::new(data, grid, dual, epsilon, coupling)
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn grid(&self) -> &RankGrid {
        &self.grid
    }

    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    pub fn dual(&self) -> &DualVariables {
        &self.dual
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Number of distinct observed covariate values.
    pub fn n_distinct_covariates(&self) -> usize {
        self.groups.len()
    }

    /// Centers a covariate given in original units.
    pub fn center(&self, x_raw: &[f64]) -> Result<Vec<f64>> {
        if x_raw.len() != self.data.n_covariates() {
            return Err(VqrError::Shape(format!(
                "probe has {} covariates, model has {}",
                x_raw.len(),
                self.data.n_covariates()
            )));
        }
        Ok(x_raw.iter().zip(self.data.x_mean()).map(|(a, m)| a - m).collect())
    }

    /// Rejects probes outside the per-column range of the observed covariates.
    pub fn check_probe(&self, x_raw: &[f64]) -> Result<()> {
        let xc = self.center(x_raw)?;
        for (k, col) in self.data.x().columns().into_iter().enumerate() {
            let (lo, hi) = col
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            if xc[k] < lo || xc[k] > hi {
                let m = self.data.x_mean()[k];
                return Err(VqrError::OutOfRange {
                    column: self.data.x_names().get(k).cloned().unwrap_or_else(|| format!("#{k}")),
                    value: x_raw[k],
                    lo: lo + m,
                    hi: hi + m,
                    nearest: self.nearest(&xc),
                });
            }
        }
        Ok(())
    }

    fn check_rank(&self, i: usize) -> Result<()> {
        if i < self.grid.len() {
            Ok(())
        } else {
            Err(VqrError::InvalidInput(format!(
                "rank index {i} out of range for {} nodes",
                self.grid.len()
            )))
        }
    }

    fn nearest(&self, xc: &[f64]) -> f64 {
        self.groups
            .iter()
            .map(|g| g.x.iter().zip(xc).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }

    fn weighted_mean(&self, i: usize, members: impl Iterator<Item = usize>) -> Result<Vec<f64>> {
        let y = self.data.y();
        let a = self.coupling.alpha.row(i);
        let mut mass = 0.0;
        let mut acc = vec![0.0; self.data.dim()];
        for j in members {
            let w = a[j];
            mass += w;
            for (k, v) in acc.iter_mut().enumerate() {
                *v += w * y[[j, k]];
            }
        }
        if !(mass > MASS_FLOOR) {
            return Err(VqrError::InsufficientMass { rank: i, mass });
        }
        acc.iter_mut().for_each(|v| *v /= mass);
        Ok(acc)
    }

    /// `Q(x, u_i)` at an observed covariate value `x` (original units).
    pub fn conditional_quantile(&self, x_raw: &[f64], i: usize) -> Result<Vec<f64>> {
        self.check_rank(i)?;
        let xc = self.center(x_raw)?;
        let scale = xc.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let g = self
            .groups
            .iter()
            .find(|g| g.x.iter().zip(&xc).all(|(a, b)| (a - b).abs() <= 1e-12 * scale));
        match g {
            Some(g) => self.weighted_mean(i, g.members.iter().copied()),
            None => Err(VqrError::NotObserved {
                nearest: self.nearest(&xc),
            }),
        }
    }

    /// `E[Y | |X - x| <= eta, U = u_i]`; `eta = 0` is exact conditioning and
    /// `eta = inf` the unconditional row mean.
    pub fn ball_conditional_quantile(&self, x_raw: &[f64], eta: f64, i: usize) -> Result<Vec<f64>> {
        self.check_rank(i)?;
        if !(eta >= 0.0) {
            return Err(VqrError::Config(format!("ball radius must be nonnegative, got {eta}")));
        }
        let xc = self.center(x_raw)?;
        let x = self.data.x();
        let eta2 = eta * eta;
        let members: Vec<usize> = (0..self.data.n_obs())
            .filter(|&j| eta.is_infinite() || dist2(x.row(j), &xc) <= eta2)
            .collect();
        if members.is_empty() {
            return Err(VqrError::EmptyBall {
                eta,
                nearest: self.nearest(&xc),
            });
        }
        self.weighted_mean(i, members.into_iter())
    }

    /// Radius for a probe under `rule`.
    pub fn eta_for(&self, x_raw: &[f64], rule: EtaRule) -> Result<f64> {
        match rule {
            EtaRule::Fixed(e) => Ok(e),
            EtaRule::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(VqrError::Config(format!("ball fraction must lie in (0, 1], got {f}")));
                }
                let xc = self.center(x_raw)?;
                let x = self.data.x();
                let mut d: Vec<f64> = (0..self.data.n_obs()).map(|j| dist2(x.row(j), &xc).sqrt()).collect();
                d.sort_by(f64::total_cmp);
                let k = ((f * d.len() as f64).ceil() as usize).clamp(1, d.len());
                Ok(d[k - 1])
            }
        }
    }

    /// Potential-based quantile `grad_u (phi(u) + b(u).x)` at node `i`, by
    /// backward differences along each axis (forward at the first node).
    pub fn potential_quantile(&self, x_raw: &[f64], i: usize, mode: PhiMode) -> Result<Vec<f64>> {
        self.check_rank(i)?;
        let field = self.potential_field(x_raw, mode)?;
        self.differentiate(&field, i)
    }

    /// `phi_i + b_i.x` for every node.
    pub fn potential_field(&self, x_raw: &[f64], mode: PhiMode) -> Result<Array1<f64>> {
        let xc = Array1::from(self.center(x_raw)?);
        let phi = rvqr::potential(&self.dual, &self.data, &self.grid, self.epsilon, mode)?;
        Ok(phi + self.dual.b.dot(&xc))
    }

    fn differentiate(&self, field: &Array1<f64>, i: usize) -> Result<Vec<f64>> {
        let grid = &self.grid;
        let n = grid.n_per_axis();
        let d = grid.dim();
        if n.checked_pow(d as u32) != Some(grid.len()) || n < 2 {
            return Err(VqrError::Unsupported(
                "potential quantiles need a tensor-product grid with at least 2 nodes per axis".into(),
            ));
        }
        let u = grid.u();
        let idx = grid.axis_indices(i);
        let mut q = vec![0.0; d];
        for (k, qk) in q.iter_mut().enumerate() {
            let mut other = idx.clone();
            let (lo, hi) = if idx[k] == 0 {
                other[k] = 1;
                (i, grid.flat_index(&other))
            } else {
                other[k] -= 1;
                (grid.flat_index(&other), i)
            };
            let du = u[[hi, k]] - u[[lo, k]];
            if du == 0.0 {
                return Err(VqrError::InvalidGrid("repeated nodes along an axis".into()));
            }
            *qk = (field[hi] - field[lo]) / du;
        }
        Ok(q)
    }

    /// Potential quantiles at every node, `I x d`.
    pub fn potential_quantiles(&self, x_raw: &[f64], mode: PhiMode) -> Result<Array2<f64>> {
        let field = self.potential_field(x_raw, mode)?;
        let mut out = Array2::zeros((self.grid.len(), self.data.dim()));
        for i in 0..self.grid.len() {
            let q = self.differentiate(&field, i)?;
            out.row_mut(i).assign(&Array1::from(q));
        }
        Ok(out)
    }

    /// Table of ball quantiles for each probe and rank, in response units.
    pub fn quantile_table(&self, probes: &[Probe], ranks: &[usize], rule: EtaRule) -> Result<QuantileTable> {
        let mut rows = Vec::with_capacity(probes.len() * ranks.len());
        for p in probes {
            self.check_probe(&p.x)?;
            let eta = match p.eta {
                Some(e) => e,
                None => self.eta_for(&p.x, rule)?,
            };
            for &i in ranks {
                let mut q = self.ball_conditional_quantile(&p.x, eta, i)?;
                if let Some(s) = self.data.y_scaling() {
                    s.unscale(&mut q);
                }
                rows.push(QuantileRow {
                    probe: p.label.clone(),
                    x: p.x.clone(),
                    eta,
                    rank: i,
                    u: self.grid.u().row(i).to_vec(),
                    q,
                });
            }
        }
        Ok(QuantileTable {
            x_names: self.data.x_names().to_vec(),
            y_names: self.data.y_names().to_vec(),
            rows,
        })
    }

    /// Pairs of ranks where the quantile map fails to be monotone at `x`.
    ///
    /// For `d = 1` grid-adjacent nodes must satisfy `Q(u_{i+1}) >= Q(u_i) - tol`;
    /// for `d >= 2` every pair must satisfy `(Q(u) - Q(u')).(u - u') >= -tol`.
    pub fn monotonicity_diagnostic(&self, x_raw: &[f64], eta: f64, tol: f64) -> Result<MonotonicityReport> {
        let n = self.grid.len();
        let mut q = Vec::with_capacity(n);
        for i in 0..n {
            q.push(self.ball_conditional_quantile(x_raw, eta, i)?);
        }
        let u = self.grid.u();
        let mut violations = Vec::new();
        let mut checked = 0;
        if self.grid.dim() == 1 {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| u[[a, 0]].total_cmp(&u[[b, 0]]));
            for w in order.windows(2) {
                checked += 1;
                let drop = q[w[0]][0] - q[w[1]][0];
                if drop > tol {
                    violations.push(Violation {
                        i: w[0],
                        j: w[1],
                        amount: drop,
                    });
                }
            }
        } else {
            for a in 0..n {
                for b in a + 1..n {
                    checked += 1;
                    let s: f64 = (0..self.grid.dim())
                        .map(|k| (q[a][k] - q[b][k]) * (u[[a, k]] - u[[b, k]]))
                        .sum();
                    if s < -tol {
                        violations.push(Violation { i: a, j: b, amount: -s });
                    }
                }
            }
        }
        Ok(MonotonicityReport {
            x: x_raw.to_vec(),
            eta,
            tol,
            checked,
            violations,
        })
    }
}

/// A covariate probe in original units, with an optional fixed ball radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub label: String,
    pub x: Vec<f64>,
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub probe: String,
    pub x: Vec<f64>,
    pub eta: f64,
    pub rank: usize,
    pub u: Vec<f64>,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileTable {
    pub x_names: Vec<String>,
    pub y_names: Vec<String>,
    pub rows: Vec<QuantileRow>,
}

impl QuantileTable {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let d = self.y_names.len();
        let mut header = vec!["probe".to_string()];
        header.extend((1..=self.x_names.len()).map(|k| format!("x_probe_{k}")));
        header.push("eta".into());
        header.push("rank".into());
        header.extend((1..=d).map(|k| format!("u_{k}")));
        header.extend((1..=d).map(|k| format!("q_{k}")));
        wr.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.probe.clone()];
            rec.extend(r.x.iter().map(|v| v.to_string()));
            rec.push(r.eta.to_string());
            rec.push(r.rank.to_string());
            rec.extend(r.u.iter().map(|v| v.to_string()));
            rec.extend(r.q.iter().map(|v| v.to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(|e| VqrError::Io {
            path: "<quantiles>".into(),
            source: e,
        })?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub i: usize,
    pub j: usize,
    pub amount: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub x: Vec<f64>,
    pub eta: f64,
    pub tol: f64,
    pub checked: usize,
    pub violations: Vec<Violation>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{center_covariates, make_rank_grid, NodePlacement};
    use ndarray::array;

    /// Hand-made coupling on 2 ranks and 3 observations.
    fn toy() -> QuantileModel {
        let data = center_covariates(&Dataset::new(array![[0.0], [0.0], [1.0]], array![[1.0], [3.0], [10.0]]).unwrap());
        let grid = make_rank_grid(1, 2, NodePlacement::RightEndpoint).unwrap();
        let alpha = array![[0.25, 0.05, 0.2], [0.05, 0.3, 0.15]];
        let coupling = rvqr::coupling_from_alpha(alpha, &data, &grid);
        let dual = DualVariables::zeros(3, 2, 1);
        QuantileModel::new(data, grid, dual, 0.1, coupling).unwrap()
    }

    #[test]
    fn groups_repeated_covariates() {
        assert_eq!(toy().n_distinct_covariates(), 2);
    }

    #[test]
    fn conditional_mean_at_observed_point() {
        let m = toy();
        let q = m.conditional_quantile(&[0.0], 0).unwrap();
        assert!((q[0] - (0.25 * 1.0 + 0.05 * 3.0) / 0.3).abs() < 1e-15);
        let q = m.conditional_quantile(&[1.0], 1).unwrap();
        assert!((q[0] - 10.0).abs() < 1e-15);
    }

    #[test]
    fn unobserved_point_reports_nearest_distance() {
        match toy().conditional_quantile(&[0.4], 0) {
            Err(VqrError::NotObserved { nearest }) => assert!((nearest - 0.4).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_radius_ball_matches_exact_conditioning() {
        let m = toy();
        for i in 0..2 {
            for x in [0.0, 1.0] {
                assert_eq!(
                    m.ball_conditional_quantile(&[x], 0.0, i).unwrap(),
                    m.conditional_quantile(&[x], i).unwrap()
                );
            }
        }
    }

    #[test]
    fn infinite_radius_is_row_mean() {
        let m = toy();
        let q = m.ball_conditional_quantile(&[0.3], f64::INFINITY, 0).unwrap();
        assert!((q[0] - (0.25 + 0.15 + 2.0) / 0.5).abs() < 1e-14);
    }

    #[test]
    fn probe_outside_range_names_nearest() {
        let m = toy();
        assert!(m.check_probe(&[0.5]).is_ok());
        match m.check_probe(&[3.0]) {
            Err(VqrError::OutOfRange { lo, hi, nearest, .. }) => {
                assert!(lo.abs() < 1e-15 && (hi - 1.0).abs() < 1e-15);
                assert!((nearest - 2.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
        let probe = Probe {
            label: "far".into(),
            x: vec![-1.0],
            eta: None,
        };
        assert!(matches!(
            m.quantile_table(&[probe], &[0], EtaRule::default()),
            Err(VqrError::OutOfRange { .. })
        ));
    }

    #[test]
    fn empty_ball_is_an_error() {
        assert!(matches!(
            toy().ball_conditional_quantile(&[0.5], 0.1, 0),
            Err(VqrError::EmptyBall { .. })
        ));
    }

    #[test]
    fn insufficient_mass_is_an_error() {
        let data = center_covariates(&Dataset::new(array![[0.0], [1.0]], array![[1.0], [2.0]]).unwrap());
        let grid = make_rank_grid(1, 2, NodePlacement::RightEndpoint).unwrap();
        let coupling = rvqr::coupling_from_alpha(array![[0.5, 0.0], [0.0, 0.5]], &data, &grid);
        let m = QuantileModel::new(data, grid, DualVariables::zeros(2, 2, 1), 0.1, coupling).unwrap();
        assert!(matches!(
            m.conditional_quantile(&[1.0], 0),
            Err(VqrError::InsufficientMass { rank: 0, .. })
        ));
    }

    #[test]
    fn fraction_radius_covers_requested_share() {
        let m = toy();
        // 3 observations: ceil(0.5 * 3) = 2 nearest to x = 0 are at distance 0
        assert_eq!(m.eta_for(&[0.0], EtaRule::Fraction(0.5)).unwrap(), 0.0);
        assert!((m.eta_for(&[0.0], EtaRule::Fraction(1.0)).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn monotone_toy_has_no_violations_but_flip_does() {
        let m = toy();
        let r = m.monotonicity_diagnostic(&[0.0], 0.0, 1e-12).unwrap();
        assert_eq!(r.checked, 1);
        assert!(r.violations.is_empty());

        let data = m.data().clone();
        let grid = m.grid().clone();
        let flipped = rvqr::coupling_from_alpha(array![[0.05, 0.3, 0.15], [0.25, 0.05, 0.2]], &data, &grid);
        let m2 = QuantileModel::new(data, grid, DualVariables::zeros(3, 2, 1), 0.1, flipped).unwrap();
        let r = m2.monotonicity_diagnostic(&[0.0], 0.0, 1e-12).unwrap();
        assert_eq!(r.violations.len(), 1);
    }

    #[test]
    fn potential_quantile_of_linear_field() {
        // psi = 0, b_i = 2 u_i, y = 0 gives phi_i = -min_j b_i x_j, here with x = (-1, 1):
        // phi_i = b_i, so the field at x is 2 u_i (1 + x)
        let data = center_covariates(&Dataset::new(array![[-1.0], [1.0]], array![[0.0], [0.0]]).unwrap());
        let grid = make_rank_grid(1, 4, NodePlacement::RightEndpoint).unwrap();
        let mut dual = DualVariables::zeros(2, 4, 1);
        for i in 0..4 {
            dual.b[[i, 0]] = 2.0 * grid.u()[[i, 0]];
        }
        let m = QuantileModel::from_dual(data, grid, dual, 0.1).unwrap();
        let q = m.potential_quantiles(&[0.5], PhiMode::Hard).unwrap();
        for i in 0..4 {
            assert!((q[[i, 0]] - 3.0).abs() < 1e-12, "{q}");
        }
    }
}
