use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },

    #[error("sizing error: {0}")]
    Sizing(String),

    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("decode error: id {id} at position {position} is outside the vocabulary")]
    Decode { position: usize, id: u32 },

    #[error("{which} length {len} exceeds the configured maximum {max}")]
    Length {
        which: &'static str,
        len: usize,
        max: usize,
    },

    #[error("degenerate batch: every target position is padding")]
    DegenerateBatch,

    #[error("checkpoint error: tensor `{tensor}`: {message}")]
    Checkpoint { tensor: String, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("corruption error: {0}")]
    Corruption(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("training error at step {step}: parameter `{param}`: {message}")]
    Training {
        param: String,
        step: u64,
        message: String,
    },

    #[error("plan error: {0}")]
    Plan(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("sampling error: class `{class}` has {available} examples, {requested} requested")]
    Sampling {
        class: String,
        available: usize,
        requested: usize,
    },

    #[error("missing artifacts, build these first: {}", .0.join(", "))]
    Orchestration(Vec<String>),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }
}
