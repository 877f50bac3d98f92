//! Bayesian quantile regression with the asymmetric Laplace working
//! likelihood, fitted by Gibbs sampling over its normal/exponential mixture
//! representation, plus outlier scores built from the posterior draws of the
//! per-observation latent variables.

pub mod ald;
pub mod cli;
pub mod data;
pub mod dists;
pub mod error;
pub mod gibbs;
pub mod outlier;
pub mod sim;

pub use ald::{AldParams, MixtureConstants, QuantileLevel};
pub use data::Dataset;
pub use dists::{GigHalfParams, RngStream};
pub use error::{Error, Result};
pub use gibbs::{run_gibbs, FitConfig, PosteriorChains, PriorSpec};
pub use outlier::{build_report, KdeSpec, KlMode, OutlierReport, ProbRule};
