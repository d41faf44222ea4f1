//! Doubly robust and outlier-robust estimation of a population mean when the
//! outcome is missing at random.
//!
//! The central estimator reweights respondents with augmented propensity
//! score weights `ω_i = 1 + (d̂_i − 1) exp(b_iᵀλ)` calibrated to the
//! full-sample means of a set of basis functions. A γ-power divergence
//! variant downweights outlying residuals. Classic competitors (complete
//! cases, inverse probability weighting, entropy balancing and a calibrated
//! propensity fit) are included, as are influence-function variances, a
//! simulation generator and a Monte Carlo harness.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod balancing;
pub mod data;
pub mod error;
pub mod estimators;
pub mod gamma;
pub mod linalg;
pub mod montecarlo;
pub mod parallel;
pub mod propensity;
pub mod simgen;
pub mod variance;

pub use data::{build_basis, BasisMatrix, BasisSpec, BasisTerm, Dataset, FitState, TransformRegistry, WeightSet, WeightSource};
pub use error::{Error, Result};
pub use estimators::{estimate_roster, CvConfig, EstimateReport, EstimationConfig, Estimator, GammaChoice};
pub use montecarlo::{run_monte_carlo, MonteCarloConfig, MonteCarloSummary};
pub use parallel::Execution;
pub use propensity::PropensityFit;
pub use simgen::{Contamination, OutcomeModel, ResponseModel, ScenarioSpec};
