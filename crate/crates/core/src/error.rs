use std::io;

use thiserror::Error;

/// Errors produced anywhere in the simulation and training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("numeric error in {layer}: {msg}")]
    Numeric { layer: String, msg: String },

    #[error("checkpoint error in tensor `{tensor}`: {msg}")]
    Checkpoint { tensor: String, msg: String },

    #[error("environment {index}: {source}")]
    Env {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("trace {trace}: {source}")]
    Trace {
        trace: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    /// True for errors caused by bad inputs rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Parse { .. } | Error::Validation(_) | Error::Range(_) | Error::Checkpoint { .. } => {
                true
            }
            Error::Env { source, .. } | Error::Trace { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
