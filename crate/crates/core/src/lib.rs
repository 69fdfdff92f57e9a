//! Gaussian copula mixture models.
//!
//! A GCMM is a finite mixture whose components pair a Gaussian copula with
//! their own nonparametric marginals. This crate fits GCMMs with EM (with or
//! without extra per-dimension observations), fits a full-covariance GMM
//! baseline, selects the component count by AIC, samples from fitted
//! models, and compares samples with the two-sample Kolmogorov-Smirnov test.

pub mod cli;
pub mod copula;
pub mod data;
pub mod em;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gmm;
mod kde;
pub mod kmeans;
pub mod marginal;
pub mod model;
pub mod normal;

pub use data::{load_sync_csv, SyncDataset, UnsyncDataset};
pub use error::{GcmmError, Result};
pub use model::{AnyModel, FitConfig, GcmmModel, GmmModel};
