//! Deep-learning cellular RSS fingerprinting with device-heterogeneity
//! handling.
//!
//! The crate is organized around the localization pipeline:
//!
//! - [`domain`]: scans, tower inventory, grid geometry, datasets.
//! - [`features`]: feature vector construction and the traditional
//!   heterogeneity transforms (linear calibration, power ratio, power
//!   difference).
//! - [`netcore`]: from-scratch multilayer perceptron with softmax
//!   cross-entropy, dropout and mini-batch SGD.
//! - [`adapt`]: transfer learning (frozen trunk, fine-tuned head) and
//!   multitask learning (shared trunk, per-device heads).
//! - [`worldgen`]: synthetic scenario generator (log-distance path loss,
//!   shadowing, per-device distortion).
//! - [`ingest`]: scan-log parsing/writing and dataset assembly.
//! - [`harness`]: experiment matrix, percentile/CDF reports.

pub mod adapt;
pub mod domain;
pub mod features;
pub mod harness;
pub mod ingest;
pub mod netcore;
pub mod worldgen;

mod rng;

pub use domain::{Dataset, Grid, Position, RssScan, Sample, TowerInventory};
pub use features::{FeatureMode, FeatureVector, LinearMap};
pub use netcore::{MlpConfig, MlpModel};

use thiserror::Error;

/// Error type shared by all modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown head '{requested}'; registered heads: [{available}]")]
    UnknownHead {
        requested: String,
        available: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
