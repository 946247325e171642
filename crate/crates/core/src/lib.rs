//! Bayesian conformal prediction.
//!
//! Posterior-predictive non-conformity scores built from MCMC draws with
//! add-one-in (AOI) reweighting, split conformal calibration, conformal risk
//! control through the Dirichlet `L⁺` statistic, and selection of the
//! conformal threshold that minimises the expected prediction-set size as
//! estimated by Gaussian-process Bayesian quadrature.
//!
//! The crate is organised bottom-up:
//!
//! - [`datasets`]: CSV loading, seeded splits, leakage-free standardisation.
//! - [`posterior`]: adaptive random-walk Metropolis for the sparse linear and
//!   logistic models, per-draw likelihoods.
//! - [`scores`]: AOI and mean posterior-predictive scores.
//! - [`conformal`]: split thresholds, prediction sets, `L⁺` risk control and
//!   the conformal-Bayes (CB) full-conformal baseline.
//! - [`quadrature`]: expected set size by Bayesian quadrature.
//! - [`optimizer`]: constrained threshold selection (the end-to-end BCP
//!   calibration).
//! - [`baselines`]: Lasso split-CP, Bayesian credible sets, MSP ranking.
//! - [`eval`]: the multi-split experiment harness and report emission.
//! - [`selfcheck`]: fast invariant checks shared by the CLI `selftest`.

pub mod baselines;
pub mod conformal;
pub mod datasets;
mod error;
pub mod eval;
pub mod optimizer;
pub mod posterior;
pub mod quadrature;
pub mod rng;
pub mod scores;
pub mod selfcheck;

pub use error::{Error, Result};
