use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected} values, got {got}")]
    InputShape { expected: usize, got: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("snapshot is empty")]
    EmptySnapshot,

    #[error("no call/put pairs with matching strike and maturity")]
    EmptyPairing,

    #[error("numeric error at (s={s}, y={y}, t={t}): {message}")]
    Numeric { s: f64, y: f64, t: f64, message: String },

    #[error("no implied volatility reproduces price {price}: {reason}")]
    NoSolution { price: f64, reason: String },

    #[error("simulation produced a non-finite state at path {path}, step {step}")]
    Simulation { path: usize, step: usize },

    #[error("contract `{id}` maturity {maturity} is not on the time grid: {reason}")]
    ContractGrid { id: String, maturity: f64, reason: String },

    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },

    #[error("grid configuration error: {0}")]
    GridConfig(String),

    #[error("PDE solver became unstable at step {step}")]
    Unstable { step: usize },

    #[error("experiment error: {0}")]
    Experiment(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
