use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("unknown task {0}")]
    UnknownTask(usize),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },

    #[error("checkpoint version {found} is not supported (expected {expected}); re-export with a matching build")]
    Version { found: u32, expected: u32 },

    #[error("config line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("gradient check failed for {name}: relative error {error:e} exceeds {threshold:e}")]
    GradCheck {
        name: String,
        error: f64,
        threshold: f64,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
