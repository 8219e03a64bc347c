use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient horizon: {available} generations materialized, at least {required} needed")]
    InsufficientHorizon { required: usize, available: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("a = {a} lies outside the supported domain (0, {limit}]; I(a) beyond mu'(0) needs mu on (0, eta_c)")]
    OutOfDomain { a: f64, limit: f64 },

    #[error("domain too small: the front came within {margin} of x = {half_width} at t = {t}; try L >= {suggested}")]
    DomainTooSmall {
        half_width: f64,
        margin: f64,
        t: f64,
        suggested: f64,
    },

    #[error("numerical instability at t = {t}: solution value {value} left [0, 1]")]
    Unstable { t: f64, value: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
