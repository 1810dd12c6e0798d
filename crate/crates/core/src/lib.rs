//! Targeted maximum likelihood and doubly robust estimation of quantiles of
//! an outcome missing at random, and of quantile treatment effects.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dataset;
pub mod density_sl;
pub mod distribution;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod nuisance;
pub mod sim;

pub use dataset::{Dataset, EstimandKind, NuisancePair, Propensity};
pub use distribution::{GridDistribution, MarginalCdf, UnitWeights};
pub use error::{Error, Result, Warning};
