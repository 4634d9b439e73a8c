use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("kernel evaluated at zero separation without softening")]
    KernelDomain,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("ensemble would have {requested} nodes, above the configured maximum {max}")]
    TooManyNodes { requested: usize, max: usize },

    #[error("discretized mass {got} differs from analytic mass {expected} by {rel_err:.3e} (tolerance {tol:.1e})")]
    MassMismatch { got: f64, expected: f64, rel_err: f64, tol: f64 },

    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },

    #[error("particle {index} left the small-data regime at t = {t}: |V - v| = {deviation:.3e} > {bound:.3e}")]
    SmallDataViolated { index: usize, t: f64, deviation: f64, bound: f64 },

    #[error("requested time {t} is outside the stored history [0, {t_max}]")]
    OutsideHistory { t: f64, t_max: f64 },

    #[error("rate fit needs at least {needed} points in the window, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("rate fit requires positive values, got {value} at t = {t}")]
    NonPositiveValue { t: f64, value: f64 },

    #[error("missing input file {0}")]
    MissingInput(PathBuf),

    #[error("config hash mismatch in {file}: expected {expected}, found {found}")]
    HashMismatch { file: String, expected: String, found: String },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { what: what.into(), detail: detail.into() }
    }
}
