use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("header mismatch: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },

    #[error("duplicate question id {0}")]
    DuplicateQuestion(u64),

    #[error("question {question_id} has part {part}, expected 1..=7")]
    PartOutOfRange { question_id: u64, part: i64 },

    #[error("unknown content id {0}")]
    UnknownContent(u64),

    #[error("out-of-order history: timestamp {current} precedes {previous}")]
    OutOfOrder { previous: i64, current: i64 },

    #[error("negative duration: {0} ms")]
    NegativeDuration(i64),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch for `{tensor}`: expected {expected:?}, found {found:?}")]
    Shape {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("token id {id} out of range for {stream} (vocabulary {size})")]
    TokenOutOfRange {
        stream: &'static str,
        id: u32,
        size: usize,
    },

    #[error("query row {row} has no attendable key")]
    EmptyAttentionRow { row: usize },

    #[error("numerical fault: {0}")]
    Numerical(String),

    #[error("AUC undefined: labels contain a single class")]
    SingleClass,

    #[error("format error: {0}")]
    Format(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        let line = err.position().map(|p| p.line()).unwrap_or(0);
        match err.into_kind() {
            csv::ErrorKind::Io(e) => Error::Io(e),
            csv::ErrorKind::UnequalLengths {
                expected_len, len, ..
            } => Error::Parse {
                line,
                message: format!("expected {expected_len} fields, found {len}"),
            },
            kind => Error::Parse {
                line,
                message: format!("{kind:?}"),
            },
        }
    }
}
