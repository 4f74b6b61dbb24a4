use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: format error at line {line}: {message}")]
    Format {
        context: String,
        line: usize,
        message: String,
    },

    #[error("{context}: duplicate entry id `{id}`")]
    DuplicateId { context: String, id: String },

    #[error("{context}: pair on line {line} references unknown {side} id `{id}`")]
    DanglingReference {
        context: String,
        line: usize,
        side: &'static str,
        id: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("overlapping spans: {0}")]
    Overlap(String),

    #[error("annotation does not fit its cell: {0}")]
    AnnotationMismatch(String),

    #[error("sequence overflow: {0}")]
    SequenceOverflow(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("degenerate comparison: {0}")]
    Degenerate(String),

    #[error("incompatible artifacts: {0}")]
    IncompatibleArtifacts(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(context: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// Data problems map to 2, numerical and statistical failures to 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) | Error::Degenerate(_) => 3,
            _ => 2,
        }
    }
}
