//! Estimation and inference for individualized quantile treatment effects
//! (IQTE) in high-dimensional two-sample quantile regression.
//!
//! Given two treatment groups with conditional quantile functions
//! `Q_k(tau | x) = x' beta_k(tau)` and an individual loading vector `x_new`,
//! the quantity of interest is
//!
//! ```text
//! delta(tau) = x_new' (beta_1(tau) - beta_2(tau))
//! ```
//!
//! The pipeline fits an l1-penalized quantile regression per group, estimates
//! the sparsity function (reciprocal conditional density at the quantile) by
//! a difference quotient, solves a variance-enhanced constrained quadratic
//! program for a projection direction, and debiases the plug-in functional.
//! The debiased estimator is asymptotically normal, which yields confidence
//! intervals and a one-sided test for `delta(tau) > 0`.
//!
//! Modules:
//! - [`data`]: sample containers and validated quantile levels
//! - [`loss`]: check loss and quantile score
//! - [`cov`]: sample and quantile-adjusted covariance matrices
//! - [`normal`]: normal density, CDF, and inverse CDF primitives
//! - [`qr_lasso`]: penalized quantile regression (ADMM solver)
//! - [`sparsity`]: difference-quotient sparsity estimates
//! - [`projection`]: constrained QP for the projection direction
//! - [`inference`]: debiased functionals, IQTE estimates, baselines
//! - [`diagnostics`]: oracle error decomposition for simulated data
//! - [`pipeline`]: per-group orchestration of the full procedure
//! - [`sim`]: scenario generator and Monte Carlo harness
//! - [`stats`]: small statistical utilities (Kolmogorov-Smirnov)

pub mod cov;
pub mod data;
pub mod diagnostics;
mod error;
pub mod inference;
mod linalg;
pub mod loss;
pub mod normal;
pub mod pipeline;
pub mod projection;
pub mod qr_lasso;
pub mod sim;
pub mod sparsity;
pub mod stats;

pub use data::{GroupSample, Loading, QuantileLevel};
pub use error::{Error, Result};
pub use inference::{DebiasedFunctional, IqteEstimate};
pub use pipeline::{GroupAnalysis, PipelineOptions};
pub use projection::{ProjectionProblem, ProjectionResult};
pub use qr_lasso::PenalizedQrFit;
pub use sim::{MonteCarloReport, ScenarioDraw, SimulationConfig};
pub use sparsity::SparsityEstimates;
