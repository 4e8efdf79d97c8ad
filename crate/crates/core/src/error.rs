use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("negative reading {value} at line {line}, column {column}")]
    NegativeReading {
        line: usize,
        column: usize,
        value: f64,
    },

    #[error("non-uniform interval at line {line}: expected {expected} minutes, found {found}")]
    NonUniformInterval {
        line: usize,
        expected: i64,
        found: i64,
    },

    #[error("ragged row at line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("less than one day of data: {steps} steps, need at least {steps_per_day}")]
    LessThanOneDay { steps: usize, steps_per_day: usize },

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("zero variance: cannot fit a normalizer on constant data")]
    ZeroVariance,

    #[error("range too short: {len} steps, need at least {needed}")]
    RangeTooShort { len: usize, needed: usize },

    #[error("no complete day in steps [{start}, {end})")]
    NoCompleteDay { start: usize, end: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {diff:e}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("no valid targets: every target cell is masked")]
    NoValidTargets,

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
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

pub type Result<T> = std::result::Result<T, Error>;
