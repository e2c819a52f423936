use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("sentence exceeds maxlen ({len} > {maxlen})")]
    ExceedsMaxlen { len: usize, maxlen: usize },
    #[error("alignment parse error at column {column}: {message}")]
    AlignmentParse { column: usize, message: String },
    #[error("heads error: {0}")]
    Heads(String),
    #[error("unalignable sentence")]
    Unalignable,
    #[error("line count mismatch: {file} diverges at line {line}")]
    LineCountMismatch { file: String, line: usize },
    #[error("invalid input at line {line}: {message}")]
    Input { line: usize, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing guide input for arch {arch}: {what}")]
    MissingGuide { arch: &'static str, what: &'static str },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("epsilon must be positive")]
    NonPositiveEpsilon,
    #[error("model format error: {0}")]
    Format(String),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch (stored {stored:016x}, computed {computed:016x})")]
    Checksum { stored: u64, computed: u64 },
    #[error("n-best error for sentence {sentence_id}: {message}")]
    NBest { sentence_id: String, message: String },
    #[error("sentence {sentence_id}: hypothesis alignment required by arch {arch}")]
    MissingAlignment { sentence_id: String, arch: &'static str },
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable kind, used by the command line for one-line errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyCorpus => "empty_corpus",
            Error::ExceedsMaxlen { .. } => "exceeds_maxlen",
            Error::AlignmentParse { .. } => "alignment_parse",
            Error::Heads(_) => "heads",
            Error::Unalignable => "unalignable",
            Error::LineCountMismatch { .. } => "line_count_mismatch",
            Error::Input { .. } => "input",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::MissingGuide { .. } => "missing_guide",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::NonPositiveEpsilon => "epsilon",
            Error::Format(_) => "format",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Checksum { .. } => "checksum",
            Error::NBest { .. } => "nbest",
            Error::MissingAlignment { .. } => "missing_alignment",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
