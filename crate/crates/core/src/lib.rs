//! Debiased machine learning (DML1/DML2) with K-fold cross-fitting.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: observation container, column roles, CSV I/O.
//! - [`moment`]: moment functions linear in the target parameter and the
//!   built-in estimand catalog.
//! - [`kernel`]: higher-order Gaussian kernels, Nadaraya–Watson nuisance fits
//!   and their first-order influence decomposition.
//! - [`crossfit`]: fold partitions and out-of-fold nuisance evaluation.
//! - [`estimate`]: DML1, DML2, oracle versions, variance and intervals.
//! - [`theory`]: closed-form higher-order bias/MSE curves and the fold advisor.
//! - [`sim`]: simulation designs and the deterministic Monte Carlo runner.
//! - [`cli`]: the `dmlwb` command-line front end.

pub mod cli;
pub mod crossfit;
pub mod data;
pub mod estimate;
pub mod kernel;
pub mod moment;
pub mod normal;
pub mod sim;
pub mod theory;

pub use crossfit::{crossfit_nuisance, partition_folds, CrossFitEvaluations, FoldPartition, NuisanceConfig};
pub use data::{load_csv, Dataset, Role};
pub use estimate::{dml1, dml2, oracle_estimates, DmlEstimate, Method};
pub use moment::{catalog_model, ModelId, MomentModel};
