use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A malformed line in a JSONL input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsatisfiable privacy target: {0}")]
    Unsatisfiable(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("schema error on {} line(s): {}", .0.len(), format_lines(.0))]
    Schema(Vec<LineError>),

    #[error("refusing to pretrain on a private corpus: {0}")]
    PrivateCorpus(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_lines(lines: &[LineError]) -> String {
    lines
        .iter()
        .map(|l| format!("line {}: {}", l.line, l.message))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
