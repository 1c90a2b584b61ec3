//! Crate-wide error type.

use std::fmt;

/// Errors produced anywhere in the pipeline.
#[derive(Debug)]
pub enum Error {
    /// Dimension mismatch; the message names both offending shapes.
    Shape(String),
    /// A softmax slice (or attention row) where every entry is blocked.
    DegenerateSlice(String),
    /// NaN or +Inf where a finite value (or NEG_INF sentinel) was required.
    NonFinite(String),
    /// Malformed file; carries the byte offset where parsing failed.
    Format { offset: usize, detail: String },
    /// Missing or inconsistent parameters / configuration.
    Config(String),
    /// A stateful protocol was driven out of order (tracking, memory banks).
    Protocol(String),
    /// A test oracle could not produce a trustworthy answer.
    Oracle(String),
    /// No feasible assignment exists (more targets than predictions).
    Infeasible(String),
    /// A caller broke an operation's contract.
    Contract(String),
    /// Synthetic-scene generation exhausted its resampling budget.
    Generation(String),
    /// No valid sample exists for the requested pairing regime.
    Sampling(String),
    /// A metric was asked to aggregate an empty evaluation set.
    Metric(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::DegenerateSlice(m) => write!(f, "degenerate slice: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Format { offset, detail } => {
                write!(f, "format error at byte {offset}: {detail}")
            }
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Protocol(m) => write!(f, "protocol error: {m}"),
            Error::Oracle(m) => write!(f, "oracle error: {m}"),
            Error::Infeasible(m) => write!(f, "infeasible: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Generation(m) => write!(f, "generation error: {m}"),
            Error::Sampling(m) => write!(f, "sampling error: {m}"),
            Error::Metric(m) => write!(f, "metric error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
