use thiserror::Error;

use crate::lfo::LfoResult;
use crate::model::SamplerDiagnostics;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient draws: need at least {needed}, got {got}")]
    InsufficientDraws { needed: usize, got: usize },

    #[error("insufficient tail: need at least {needed} excesses, got {got}")]
    InsufficientTail { needed: usize, got: usize },

    #[error("insufficient variation: all excesses are equal")]
    InsufficientVariation,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite log density at observation {j} for draw {draw}")]
    NumericDomain { j: usize, draw: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sampler initialization failed: {0}")]
    Initialization(String),

    #[error("fit failed at prefix length {prefix_len}: {reason}")]
    FitFailure {
        prefix_len: usize,
        reason: String,
        diagnostics: SamplerDiagnostics,
    },

    /// A refit failed twice inside an LFO run. `partial` holds every
    /// pointwise value computed before the failure.
    #[error("LFO aborted at i = {index}: {source}")]
    LfoAborted {
        index: usize,
        partial: Box<LfoResult>,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors raised by the sampler rather than by bad input.
    pub fn is_fit_failure(&self) -> bool {
        match self {
            Error::FitFailure { .. } | Error::Initialization(_) => true,
            Error::LfoAborted { source, .. } => source.is_fit_failure(),
            _ => false,
        }
    }
}
