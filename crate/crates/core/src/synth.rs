//! Seeded generator for the linear-in-covariate model `Y = alpha(U) + beta(U) X`
//! with `U` uniform and independent of `X`, plus its exact quantile function.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VqrError};
use crate::measures::Dataset;

/// `a + b u`; nondecreasing when `b >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub a: f64,
    pub b: f64,
}

impl Linear {
    pub fn at(&self, u: f64) -> f64 {
        self.a + self.b * u
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "law")]
pub enum CovariateLaw {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_obs: usize,
    pub seed: u64,
    /// Response dimension, 1 or 2.
    pub dim: usize,
    pub x_law: CovariateLaw,
    /// Intercept curve (used when `dim = 1`).
    pub alpha: Linear,
    /// Slope curve (used when `dim = 1`).
    pub beta: Linear,
    /// Per-axis slopes of `Y = U + diag(beta) U x` (used when `dim = 2`).
    pub beta2: [f64; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_obs: 2000,
            seed: 7,
            dim: 1,
            x_law: CovariateLaw::Uniform { lo: 0.0, hi: 1.0 },
            alpha: Linear { a: 0.0, b: 1.0 },
            beta: Linear { a: 1.0, b: 1.0 },
            beta2: [0.5, 0.5],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_obs == 0 {
            return Err(VqrError::Config("need at least one observation".into()));
        }
        if self.dim != 1 && self.dim != 2 {
            return Err(VqrError::Config(format!(
                "generator supports d = 1 or 2, got {}",
                self.dim
            )));
        }
        match self.x_law {
            CovariateLaw::Uniform { lo, hi } if !(lo < hi) => {
                Err(VqrError::Config(format!("uniform law needs lo < hi, got [{lo}, {hi}]")))
            }
            CovariateLaw::Normal { sd, .. } if !(sd > 0.0) => {
                Err(VqrError::Config(format!("normal law needs sd > 0, got {sd}")))
            }
            _ => Ok(()),
        }
    }

    /// True conditional quantile `Q(x, u)`.
    pub fn true_quantile(&self, x: f64, u: &[f64]) -> Vec<f64> {
        if self.dim == 1 {
            vec![self.alpha.at(u[0]) + self.beta.at(u[0]) * x]
        } else {
            (0..2).map(|k| u[k] + self.beta2[k] * u[k] * x).collect()
        }
    }
}

/// Draws `n_obs` rows; the dataset has one covariate `x` and responses `y`
/// (or `y1, y2`), uncentered.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = match cfg.x_law {
        CovariateLaw::Normal { mean, sd } => Some(Normal::new(mean, sd).map_err(|e| VqrError::Config(e.to_string()))?),
        CovariateLaw::Uniform { .. } => None,
    };
    let mut x = Array2::zeros((cfg.n_obs, 1));
    let mut y = Array2::zeros((cfg.n_obs, cfg.dim));
    for j in 0..cfg.n_obs {
        let xv = match (cfg.x_law, &normal) {
            (CovariateLaw::Uniform { lo, hi }, _) => rng.gen_range(lo..hi),
            (_, Some(n)) => n.sample(&mut rng),
            _ => unreachable!("normal law always has a sampler"),
        };
        let u: Vec<f64> = (0..cfg.dim).map(|_| rng.gen::<f64>()).collect();
        x[[j, 0]] = xv;
        for (k, v) in cfg.true_quantile(xv, &u).into_iter().enumerate() {
            y[[j, k]] = v;
        }
    }
    let y_names = if cfg.dim == 1 {
        vec!["y".to_string()]
    } else {
        vec!["y1".to_string(), "y2".to_string()]
    };
    Dataset::new(x, y)?.with_names(vec!["x".into()], y_names)
}

pub fn write_dataset_csv<W: std::io::Write>(data: &Dataset, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = data.x_names().to_vec();
    header.extend(data.y_names().iter().cloned());
    wr.write_record(&header)?;
    for j in 0..data.n_obs() {
        let mut rec: Vec<String> = data.raw_x(j).iter().map(|v| v.to_string()).collect();
        rec.extend(data.y().row(j).iter().map(|v| v.to_string()));
        wr.write_record(&rec)?;
    }
    wr.flush().map_err(|e| VqrError::Io {
        path: "<dataset>".into(),
        source: e,
    })?;
    Ok(())
}

/// Ground truth at covariate levels `x_levels` (probability levels of the
/// sample covariate) and ranks `k/steps`, `k = 1..steps-1` per axis.
pub fn write_truth_csv<W: std::io::Write>(cfg: &SynthConfig, data: &Dataset, steps: usize, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["x_level".to_string(), "x".to_string()];
    if cfg.dim == 1 {
        header.extend(["u".to_string(), "q".to_string()]);
    } else {
        header.extend(["u1", "u2", "q1", "q2"].map(String::from));
    }
    wr.write_record(&header)?;
    let axis: Vec<f64> = (1..steps).map(|k| k as f64 / steps as f64).collect();
    for level in [0.1, 0.3, 0.6, 0.9] {
        let xv = crate::classical_qr::covariate_quantile(data, level)[0];
        let nodes: Vec<Vec<f64>> = if cfg.dim == 1 {
            axis.iter().map(|&u| vec![u]).collect()
        } else {
            axis.iter()
                .flat_map(|&a| axis.iter().map(move |&b| vec![a, b]))
                .collect()
        };
        for u in nodes {
            let mut rec = vec![level.to_string(), xv.to_string()];
            rec.extend(u.iter().map(|v| v.to_string()));
            rec.extend(cfg.true_quantile(xv, &u).iter().map(|v| v.to_string()));
            wr.write_record(&rec)?;
        }
    }
    wr.flush().map_err(|e| VqrError::Io {
        path: "<truth>".into(),
        source: e,
    })?;
    Ok(())
}
