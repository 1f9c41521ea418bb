//! Error type shared by all pipeline stages.

use alloc::string::String;
use core::fmt;

/// Failure modes of the pipeline, kept coarse on purpose: the CLI maps each
/// variant to a distinct exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Invalid configuration or argument (bad fraction, unknown name, ...).
    Config(String),
    /// Tensor or table dimensions do not line up.
    Shape(String),
    /// A computation produced a non-finite value or failed to converge.
    Numerical(String),
    /// A metric is undefined for the given inputs (e.g. single-class AUC).
    UndefinedMetric(String),
    /// A slide or patient has no tissue to sample regions from.
    NoTissue(String),
    /// An operation received an empty input it cannot work with.
    Empty(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Numerical(m) => write!(f, "numerical failure: {m}"),
            Error::UndefinedMetric(m) => write!(f, "undefined metric: {m}"),
            Error::NoTissue(m) => write!(f, "no tissue: {m}"),
            Error::Empty(m) => write!(f, "empty input: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
