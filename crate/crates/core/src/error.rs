use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },

    #[error("degenerate vector: zero norm in {0}")]
    DegenerateVector(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    Rank([usize; 2]),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("size error in {path}: expected {expected} bytes, found {found}")]
    Size {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("non-finite gradient at step {step} in parameter {param}")]
    NonFiniteGradient { step: usize, param: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable tag used by the CLI's error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::DegenerateVector(_) => "degenerate_vector",
            Error::Rank(_) => "rank",
            Error::Format { .. } => "format",
            Error::Size { .. } => "size",
            Error::Data(_) => "data",
            Error::Graph(_) => "graph",
            Error::Config(_) => "config",
            Error::Label { .. } => "label",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
