use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Loss components at the batch where training diverged.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub task: usize,
    pub epoch: usize,
    pub batch: usize,
    pub proto: f64,
    pub align: f64,
    pub old: f64,
    pub sep: f64,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        found: [u8; 4],
        expected: [u8; 4],
    },

    #[error("{path}: unsupported version {found} (this build reads version {supported})")]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("{path}: truncated payload, expected {expected} bytes but found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(
        "non-finite loss at task {} epoch {} batch {} (proto={}, align={}, old={}, sep={})",
        .0.task, .0.epoch, .0.batch, .0.proto, .0.align, .0.old, .0.sep
    )]
    NonFiniteLoss(Box<Divergence>),

    #[error("synthetic generation failed: {0}")]
    Generation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the optimisation itself rather than by inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFiniteLoss(_) | Error::Numerical(_))
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Validation(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
