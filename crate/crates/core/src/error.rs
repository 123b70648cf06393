// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the workbench.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("gradient tape already consumed")]
    TapeReuse,

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("conflicting interventions: {0}")]
    InterventionConflict(String),

    #[error("invalid intervention: {0}")]
    InvalidIntervention(String),

    #[error("empty support: {0}")]
    EmptySupport(String),

    #[error("mediation fraction undefined: p_base == p_src ({0})")]
    UndefinedMediation(f64),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("model construction failed: {0}")]
    Construction(String),

    #[error("training diverged at step {step}")]
    TrainingDiverged {
        step: usize,
        /// Weights from the last step whose loss was finite.
        last_finite: Box<crate::model::ModelWeights>,
    },

    #[error("training failed: {0}")]
    Training(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{kind} experiment failed: {source}")]
    Experiment { kind: String, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
