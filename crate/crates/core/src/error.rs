use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Variants split into two families that map onto process exit codes:
/// validation problems (bad input, bad shapes, bad files) and runtime
/// failures (solver non-convergence, optimization collapse).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("empty foreground")]
    EmptyForeground,

    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),

    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal {residual:e})")]
    SvdNoConvergence { sweeps: usize, residual: f64 },

    #[error("co-segmentation collapsed to fewer than two labels: {0}")]
    Collapse(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Format(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that happen after inputs were accepted.
    pub fn is_runtime(&self) -> bool {
        match self {
            Error::SvdNoConvergence { .. } | Error::Collapse(_) => true,
            Error::Stage { source, .. } => source.is_runtime(),
            _ => false,
        }
    }

    /// Process exit code: 1 for validation errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        if self.is_runtime() {
            2
        } else {
            1
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
