use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input was not well-formed JSON, or did not have the expected shape.
    #[error("parse error at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{kind} {id} is referenced but not defined")]
    Reference { kind: &'static str, id: u64 },

    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u64 },

    #[error("invalid annotation {annotation_id}: {reason}")]
    InvalidAnnotation { annotation_id: u64, reason: String },

    #[error("invalid detection #{index}: {reason}")]
    InvalidDetection { index: usize, reason: String },

    #[error("invalid image {image_id}: {reason}")]
    InvalidImage { image_id: u64, reason: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("clustering: {0}")]
    Clustering(String),

    #[error("template `{0}` not found")]
    TemplateNotFound(String),

    #[error("invalid controller config: {0}")]
    Config(String),

    #[error("expected epoch {expected}, got {got}")]
    Sequence { expected: u64, got: u64 },

    #[error("controller already stopped; no further epochs accepted")]
    Stopped,

    #[error("snapshot decode error: {0}")]
    Snapshot(String),

    #[error("dataset sets differ: {0}")]
    DatasetMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Builds a [`Error::Parse`] from a serde_json error, resolving the
    /// line/column position back to a byte offset in `raw`.
    pub(crate) fn from_json(err: &serde_json::Error, raw: &[u8]) -> Self {
        let (line, column) = (err.line(), err.column());
        Error::Parse {
            offset: byte_offset(raw, line, column),
            line,
            column,
            message: err.to_string(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

// serde_json reports 1-based lines and 1-based columns (0 when the error is at
// the start of a line).
fn byte_offset(raw: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut start = 0;
    for _ in 1..line {
        match raw[start..].iter().position(|&b| b == b'\n') {
            Some(p) => start += p + 1,
            None => return raw.len(),
        }
    }
    (start + column.saturating_sub(1)).min(raw.len())
}
