use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shape or length mismatch).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value appeared during computation.
    #[error("numeric failure at {stage}: {detail}")]
    Numeric { stage: String, detail: String },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error on line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("join error: {0}")]
    Join(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("degenerate vector: {0}")]
    Degenerate(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("finite-difference oracle failed at coordinate {coordinate}: {detail}")]
    Oracle { coordinate: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            stage: stage.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line surface:
    /// 1 usage/validation, 2 data error, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Config(_) => 1,
            Error::Numeric { .. } | Error::Oracle { .. } => 3,
            Error::Format { .. }
            | Error::Corruption(_)
            | Error::Validation(_)
            | Error::Parse { .. }
            | Error::Join(_)
            | Error::Coverage(_)
            | Error::Degenerate(_)
            | Error::Sampling(_)
            | Error::Io { .. } => 2,
        }
    }
}

impl Error {
    /// Prefixes the message with `ctx`, keeping the variant (and exit code).
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Contract(m) => Error::Contract(format!("{ctx}: {m}")),
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            Error::Numeric { stage, detail } => Error::Numeric {
                stage: format!("{ctx}: {stage}"),
                detail,
            },
            Error::Corruption(m) => Error::Corruption(format!("{ctx}: {m}")),
            Error::Validation(m) => Error::Validation(format!("{ctx}: {m}")),
            Error::Join(m) => Error::Join(format!("{ctx}: {m}")),
            Error::Coverage(m) => Error::Coverage(format!("{ctx}: {m}")),
            Error::Degenerate(m) => Error::Degenerate(format!("{ctx}: {m}")),
            Error::Sampling(m) => Error::Sampling(format!("{ctx}: {m}")),
            other => other,
        }
    }
}
