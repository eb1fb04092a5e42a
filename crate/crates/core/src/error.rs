use std::path::PathBuf;

use thiserror::Error;

use crate::classical_qr::QrFit;
use crate::rvqr::Unconverged;

pub type Result<T> = std::result::Result<T, VqrError>;

#[derive(Debug, Error)]
pub enum VqrError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("column `{0}` not found in header")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: cannot parse `{value}` as a finite number")]
    Parse { row: usize, column: String, value: String },

    #[error("dataset has no rows")]
    EmptyData,

    #[error("invalid rank grid: {0}")]
    InvalidGrid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(
        "solver did not converge after {} iterations (gradient inf-norm {:.3e})",
        .0.report.iterations,
        .0.report.grad_norm
    )]
    NotConverged(Box<Unconverged>),

    #[error(
        "quantile regression at t = {} did not converge after {} iterations",
        .0.t,
        .0.iterations
    )]
    QrNotConverged(Box<QrFit>),

    #[error(
        "conditional mass {mass:.3e} at rank index {rank} is below the floor; \
         use the ball estimator (means over a neighborhood of x) instead"
    )]
    InsufficientMass { rank: usize, mass: f64 },

    #[error("covariate point is not an observed value (nearest observation at distance {nearest:.6e})")]
    NotObserved { nearest: f64 },

    #[error(
        "probe {column} = {value} lies outside the observed range [{lo}, {hi}] \
         (nearest observation at distance {nearest:.6e})"
    )]
    OutOfRange {
        column: String,
        value: f64,
        lo: f64,
        hi: f64,
        nearest: f64,
    },

    #[error("no observation within radius {eta:.6e} (nearest observation at distance {nearest:.6e})")]
    EmptyBall { eta: f64, nearest: f64 },

    #[error("Sinkhorn did not converge after {iterations} iterations (marginal residual {residual:.3e})")]
    SinkhornNotConverged { iterations: usize, residual: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),
}
