use std::path::PathBuf;

use thiserror::Error;

/// Coarse error classes. The numeric values are stable: they are the CLI
/// exit codes and the C ABI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(i32)]
pub enum ErrorCategory {
    Format = 10,
    Pairing = 11,
    Shape = 12,
    Numeric = 13,
    Schema = 14,
    Parameter = 15,
    Population = 16,
    Class = 17,
    Degenerate = 18,
    Optimization = 19,
    Stratification = 20,
    Coverage = 21,
    Parse = 22,
    Dependency = 23,
    Io = 24,
}

impl ErrorCategory {
    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorCategory::Format => "format",
            ErrorCategory::Pairing => "pairing",
            ErrorCategory::Shape => "shape",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Schema => "schema",
            ErrorCategory::Parameter => "parameter",
            ErrorCategory::Population => "population",
            ErrorCategory::Class => "class",
            ErrorCategory::Degenerate => "degeneracy",
            ErrorCategory::Optimization => "optimization",
            ErrorCategory::Stratification => "stratification",
            ErrorCategory::Coverage => "coverage",
            ErrorCategory::Parse => "parse",
            ErrorCategory::Dependency => "dependency",
            ErrorCategory::Io => "io",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("pairing error: sublayer {sublayer} has no lora_{missing} factor")]
    Pairing { sublayer: String, missing: char },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("population error: {0}")]
    Population(String),

    #[error("class error: {0}")]
    Class(String),

    #[error("degeneracy error: {0}")]
    Degenerate(String),

    #[error("optimization error: {0}")]
    Optimization(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Format(_) => ErrorCategory::Format,
            Error::Pairing { .. } => ErrorCategory::Pairing,
            Error::Shape(_) => ErrorCategory::Shape,
            Error::Numeric(_) => ErrorCategory::Numeric,
            Error::Schema(_) => ErrorCategory::Schema,
            Error::Parameter(_) => ErrorCategory::Parameter,
            Error::Population(_) => ErrorCategory::Population,
            Error::Class(_) => ErrorCategory::Class,
            Error::Degenerate(_) => ErrorCategory::Degenerate,
            Error::Optimization(_) => ErrorCategory::Optimization,
            Error::Stratification(_) => ErrorCategory::Stratification,
            Error::Coverage(_) => ErrorCategory::Coverage,
            Error::Parse { .. } => ErrorCategory::Parse,
            Error::Dependency(_) => ErrorCategory::Dependency,
            Error::Io { .. } => ErrorCategory::Io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
