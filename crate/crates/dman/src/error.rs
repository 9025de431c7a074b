use thiserror::Error;

/// Errors surfaced by the library and mapped to exit codes by the CLI.
#[derive(Debug, Error)]
pub enum DmanError {
    #[error("dimension mismatch in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("softmax row {row} is fully masked")]
    DegenerateMask { row: usize },

    #[error("long-term attention needs at least one memory row")]
    EmptyMemory,

    #[error("segment sequencing error: expected segment {expected}, got {got}")]
    Sequencing { expected: usize, got: usize },

    #[error("cold start: user {user} has no observed segments")]
    ColdStart { user: u64 },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("cannot draw {requested} distinct items from {available} available")]
    ExhaustedVocab { requested: usize, available: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("config line {line}: key `{key}`: {msg}")]
    Config {
        key: String,
        line: usize,
        msg: String,
    },

    #[error("checkpoint digest mismatch: header says {expected}, payload hashes to {actual}")]
    DigestMismatch { expected: String, actual: String },

    #[error("unsupported checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("empty test set")]
    EmptyTestSet,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DmanError {
    /// CLI exit code: 1 for validation problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            DmanError::Parse { .. }
            | DmanError::Config { .. }
            | DmanError::InvalidArgument(_)
            | DmanError::VersionMismatch { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, DmanError>;
