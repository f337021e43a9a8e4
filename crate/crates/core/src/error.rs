use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {}", fmt_data(*.row, .message))]
    Data { row: Option<usize>, message: String },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("I - lambda*W is singular or near-singular at lambda = {lambda} (condition estimate {condition:e})")]
    SingularSar { lambda: f64, condition: f64 },

    #[error("no kernel mass at z = {z}")]
    OutOfSupport { z: f64 },

    #[error("degenerate Fisher information at z = {z}")]
    DegenerateInformation { z: f64 },

    #[error("profile scoring diverged at z = {z} (eta = {eta})")]
    Divergence { z: f64, eta: f64 },

    #[error("profile failed for observation {index}: {source}")]
    Profile {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    /// Every optimizer start failed; the per-start trace is kept for reporting.
    #[error("fit error: {message}")]
    Fit {
        message: String,
        trace: Vec<crate::gmm::StartTrace>,
    },

    #[error("B2 is near-singular (condition number {condition:e})")]
    NearSingular { condition: f64 },

    #[error("harness error: method {method} failed {failures} of {reps} replications")]
    Harness {
        method: String,
        failures: usize,
        reps: usize,
    },

    #[error("io error: {0}")]
    Io(String),
}

fn fmt_data(row: Option<usize>, message: &str) -> String {
    match row {
        Some(r) => format!("row {r}: {message}"),
        None => message.to_string(),
    }
}

impl Error {
    pub(crate) fn data(message: impl Into<String>) -> Self {
        Error::Data {
            row: None,
            message: message.into(),
        }
    }

    pub(crate) fn data_row(row: usize, message: impl Into<String>) -> Self {
        Error::Data {
            row: Some(row),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
