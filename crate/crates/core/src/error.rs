use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shapes, ranges, ordering).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity appeared where a finite value is required.
    #[error("numerical failure: non-finite value in {0}")]
    NonFinite(String),

    /// Every burn-in ratio was zero, so rejection sampling could never accept.
    #[error("degenerate ratio model at label {label}: all {draws} burn-in ratios are zero")]
    DegenerateModel { label: f64, draws: usize },

    #[error(
        "proposal budget exhausted at label {label}: {accepted} accepted of {proposed} proposed \
         (acceptance rate {rate:.6})"
    )]
    BudgetExhausted {
        label: f64,
        accepted: usize,
        proposed: usize,
        rate: f64,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Malformed experiment configuration; `key` names the offending field.
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    /// A persisted artifact does not match what the configuration expects.
    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("missing artifact: {} (run the upstream stage first)", .0.display())]
    MissingArtifact(PathBuf),

    /// A sample file does not have the expected columns.
    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
