//! Conservative doubly robust (CDR) learning for debiased recommendation.
//!
//! The crate is organised bottom-up:
//!
//! - [`datamodel`]: rating tables, triplet I/O, binarization and splits.
//! - [`models`]: biased matrix-factorization predictors, pointwise errors,
//!   Adam, and propensity tables.
//! - [`estimators`]: naive / IPS / DR / CDR losses with closed-form bias,
//!   variance and Hoeffding tail bounds.
//! - [`filter`]: MC-dropout imputation statistics and the `σ̂/μ̂ < η` test.
//! - [`trainer`]: joint training of recommendation and imputation models.
//! - [`simulator`]: synthetic worlds with known propensities and Monte Carlo
//!   checks of every closed form.
//! - [`metrics`]: AUC, NDCG@K, Recall@K and the poisonous-imputation ratio.
//! - [`experiment`]: configuration, manifests and the runner behind the CLI.

pub mod datamodel;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod filter;
pub mod metrics;
pub mod models;
pub mod numeric;
pub mod rng;
pub mod simulator;
pub mod trainer;

pub use error::{Error, Result};
