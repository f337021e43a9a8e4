//! Estimation of partially linear probit models whose latent errors follow a
//! spatial autoregressive (SAR) process.
//!
//! The nonparametric component `g` is profiled out by kernel-weighted
//! likelihood (Fisher scoring at each query point); the regression
//! coefficients and the spatial parameter are then estimated by GMM on
//! instrument-weighted generalized residuals. A Monte Carlo harness
//! reproduces the two simulation designs used to study the estimator.
//!
//! Inner loops (profile solves, bandwidth grids, replications) run on rayon
//! when the default `parallel` feature is enabled.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod gmm;
pub mod kernel;
pub mod optimize;
pub mod par;
pub mod probit;
pub mod profile;
pub mod simulation;
pub mod spatial;

pub use data::Dataset;
pub use error::{Error, Result};
pub use gmm::{
    covariance_estimate, fit, fit_lsaep, fit_plpm, fit_plspm, g_curve, instruments, moment_vector, FitOptions,
    FitResult, Method, MomentValue, Theta,
};
pub use kernel::{select_bandwidth, Bandwidth};
pub use par::Execution;
pub use profile::{solve_g_hat, ProfileFit, ScoringConfig};
pub use simulation::{generate_scenario, run_replications, Case, ReplicationSummary, ScenarioConfig};
pub use spatial::{build_knn_weights, sar_variance, Coordinates, SarVariance, WeightMatrix};
