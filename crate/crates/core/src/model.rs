//! Fitted model persistence.
//!
//! The JSON document holds `epsilon`, the grid (`u` column-major, `mu`), `psi`,
//! `b` (column-major, one list per covariate), `x_mean`, column names, the
//! solve report and the centered dataset, so quantiles can be recomputed from
//! the file alone.

use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VqrError};
use crate::measures::{columns, from_columns, Dataset, GridScheme, NodePlacement, RankGrid};
use crate::quantile::QuantileModel;
use crate::rvqr::{DualVariables, Gauge, PhiMode, SolveReport};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridDoc {
    pub u: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub scheme: GridScheme,
    pub placement: NodePlacement,
    pub n_per_axis: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDoc {
    pub epsilon: f64,
    pub phi_mode: PhiMode,
    pub grid: GridDoc,
    pub psi: Vec<f64>,
    pub b: Vec<Vec<f64>>,
    pub gauge: Gauge,
    pub x_mean: Vec<f64>,
    pub x_names: Vec<String>,
    pub y_names: Vec<String>,
    pub report: SolveReport,
    pub data: Dataset,
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub epsilon: f64,
    pub phi_mode: PhiMode,
    pub grid: RankGrid,
    pub dual: DualVariables,
    pub report: SolveReport,
    /// Centered dataset the model was fitted on.
    pub data: Dataset,
}

impl FittedModel {
    pub fn to_doc(&self) -> ModelDoc {
        ModelDoc {
            epsilon: self.epsilon,
            phi_mode: self.phi_mode,
            grid: GridDoc {
                u: columns(self.grid.u()),
                mu: self.grid.mu().to_vec(),
                scheme: self.grid.scheme(),
                placement: self.grid.placement(),
                n_per_axis: self.grid.n_per_axis(),
            },
            psi: self.dual.psi.to_vec(),
            b: columns(self.dual.b.view()),
            gauge: self.dual.gauge.clone(),
            x_mean: self.data.x_mean().to_vec(),
            x_names: self.data.x_names().to_vec(),
            y_names: self.data.y_names().to_vec(),
            report: self.report.clone(),
            data: self.data.clone(),
        }
    }

    pub fn from_doc(doc: ModelDoc) -> Result<Self> {
        let ni = doc.grid.mu.len();
        let u = from_columns(&doc.grid.u, ni)?;
        let grid = RankGrid::from_parts(
            u,
            Array1::from(doc.grid.mu),
            doc.grid.scheme,
            doc.grid.placement,
            doc.grid.n_per_axis,
        )?;
        let b = from_columns(&doc.b, ni)?;
        if b.ncols() != doc.data.n_covariates() || doc.psi.len() != doc.data.n_obs() {
            return Err(VqrError::Shape(
                "model potentials do not match the embedded dataset".into(),
            ));
        }
        Ok(FittedModel {
            epsilon: doc.epsilon,
            phi_mode: doc.phi_mode,
            grid,
            dual: DualVariables {
                psi: Array1::from(doc.psi),
                b,
                gauge: doc.gauge,
            },
            report: doc.report,
            data: doc.data,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_doc(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|source| VqrError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|source| VqrError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&s)
    }

    /// Rebuilds the coupling and the quantile reader.
    pub fn quantile_model(&self) -> Result<QuantileModel> {
        QuantileModel::from_dual(self.data.clone(), self.grid.clone(), self.dual.clone(), self.epsilon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{center_covariates, make_rank_grid};
    use crate::rvqr::{solve, SolverConfig};
    use ndarray::array;

    #[test]
    fn json_roundtrip_preserves_quantiles() {
        let data = center_covariates(
            &Dataset::new(array![[0.0], [1.0], [2.0], [3.0]], array![[0.1], [0.9], [0.4], [1.5]]).unwrap(),
        );
        let grid = make_rank_grid(1, 3, NodePlacement::RightEndpoint).unwrap();
        let sol = solve(&data, &grid, &SolverConfig::default().with_epsilon(0.5)).unwrap();
        let m = FittedModel {
            epsilon: 0.5,
            phi_mode: PhiMode::Soft,
            grid,
            dual: sol.dual,
            report: sol.report,
            data,
        };
        let back = FittedModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.dual, m.dual);
        assert_eq!(back.grid, m.grid);
        let q1 = m.quantile_model().unwrap().conditional_quantile(&[1.0], 1).unwrap();
        let q2 = back.quantile_model().unwrap().conditional_quantile(&[1.0], 1).unwrap();
        assert_eq!(q1, q2);
    }

    #[test]
    fn schema_is_column_major() {
        let data = center_covariates(&Dataset::new(array![[0.0, 1.0], [1.0, 0.0]], array![[0.1], [0.9]]).unwrap());
        let grid = make_rank_grid(1, 2, NodePlacement::RightEndpoint).unwrap();
        let mut dual = DualVariables::zeros(2, 2, 2);
        dual.b = array![[1.0, 2.0], [3.0, 4.0]];
        let m = FittedModel {
            epsilon: 0.1,
            phi_mode: PhiMode::Hard,
            grid,
            dual,
            report: solve(
                &data,
                &make_rank_grid(1, 2, NodePlacement::RightEndpoint).unwrap(),
                &SolverConfig::default(),
            )
            .unwrap()
            .report,
            data,
        };
        let v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        assert_eq!(v["b"], serde_json::json!([[1.0, 3.0], [2.0, 4.0]]));
        assert_eq!(v["grid"]["u"], serde_json::json!([[0.5, 1.0]]));
        assert_eq!(v["phi_mode"], "hard");
        for key in ["epsilon", "psi", "x_mean", "x_names", "y_names", "report", "data"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
