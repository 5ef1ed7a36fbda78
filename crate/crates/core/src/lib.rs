//! Set prediction with coverage guarantees, fairness audits, and clustered
//! inference over precomputed classifier probabilities.
//!
//! The crate takes softmax outputs (it never runs models) and provides:
//!
//! - [`data`]: dataset ingestion (CSV/JSONL) and deterministic stratified
//!   splitting;
//! - [`scores`]: conformal score functions (lac, aps, raps, saps) with
//!   temperature scaling and seeded randomization;
//! - [`calibration`]: marginal and Mondrian (group-conditional) conformal
//!   quantiles, and the avg-k softmax threshold;
//! - [`setpred`]: per-record and batch prediction sets;
//! - [`tuning`]: random search for score hyperparameters and the avg-k
//!   coverage binary search;
//! - [`audit`]: per-group coverage / set-size / singleton metrics, accuracy
//!   improvements, disparate impact, and the key-factor table;
//! - [`humansim`]: synthetic biased classifiers and simulated set-assisted
//!   decision makers;
//! - [`inference`]: clustered logistic models with cluster-robust standard
//!   errors, odds ratios, and maxROR;
//! - [`config`] / [`run`]: reproducible config-driven CLI pipelines.

pub mod audit;
pub mod calibration;
pub mod config;
pub mod data;
pub mod error;
pub mod humansim;
pub mod inference;
pub mod run;
pub mod scores;
pub mod setpred;
pub mod stream;
pub mod tuning;

pub use error::{Error, Result};
