//! Profiled side-channel analysis toolkit: trace handling, an attention-based
//! residual network with a hand-rolled f64 autodiff engine, maximum-likelihood
//! key ranking, CPA, and class gradient visualization.

pub mod aes;
pub mod analysis;
#[cfg(test)]
pub(crate) mod testutil;
pub mod attack;
pub mod engine;
pub mod netspec;
pub mod plot;
pub mod traces;

pub use analysis::{ClassPolicy, CpaResult, PowerModel, WeightMap};
pub use attack::{RankCurve, ScoreVector, Threshold};
pub use engine::{
    EpochStats, OptimizerConfig, Provenance, TrainedModel, TrainingConfig,
};
pub use netspec::{CbamConfig, NetworkConfig, PoolKind};
pub use traces::{KeyMaterial, LeakageModel, Standardizer, SynthConfig, TraceSet};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value; the message names the offending field.
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing field: {0}")]
    MissingField(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("unknown preset: {0} (expected one of dpav4, aes_rd, aes_hd, ascad)")]
    UnknownPreset(String),
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Hdf5(#[from] hdf5::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input (config, shapes, unknown
    /// names) as opposed to runtime failures. The CLI maps the former to
    /// exit code 2 and the latter to exit code 3.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Shape(_)
                | Error::MissingField(_)
                | Error::Index(_)
                | Error::UnknownPreset(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
