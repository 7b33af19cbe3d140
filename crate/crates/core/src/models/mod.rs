//! Factorization predictors, pointwise errors, Adam and propensity tables.

mod adam;
mod factor;
mod loss;
mod propensity;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use factor::{FactorModel, Link, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use loss::{pointwise_error, pointwise_error_grad, LossKind, BCE_CLAMP};
pub use propensity::{estimate_propensity_popularity, PropensityTable, DEFAULT_PROPENSITY_FLOOR};
