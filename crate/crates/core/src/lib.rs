//! Vector quantile regression through entropic optimal transport with a
//! mean-independence constraint.
//!
//! The pipeline: build a [`measures::Dataset`] and a [`measures::RankGrid`],
//! center the covariates, minimize the smoothed dual with
//! [`rvqr::solve`], then read conditional quantiles off the coupling with
//! [`quantile::QuantileModel`]. [`classical_qr`] provides the t-by-t
//! pinball-loss baseline and [`oracles`] the independent checks.

// `!(v > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accel;
pub mod classical_qr;
pub mod compare;
pub mod error;
pub mod measures;
pub mod model;
pub mod oracles;
pub mod quantile;
pub mod rvqr;
pub mod synth;

pub use error::{Result, VqrError};
pub use measures::{center_covariates, load_csv, make_rank_grid, Dataset, NodePlacement, RankGrid};
pub use rvqr::{solve, Coupling, DualVariables, SolveReport, SolverConfig};
