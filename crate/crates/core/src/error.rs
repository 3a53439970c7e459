use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: missing or invalid header, expected `{expected}`")]
    MissingHeader { line: usize, expected: &'static str },

    #[error("line {line}, column `{column}`: {message}")]
    Parse {
        line: usize,
        column: &'static str,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty {side} table: no student has at least two usable interactions")]
    EmptyTable { side: &'static str },

    #[error("AUC undefined: labels contain a single class")]
    AucUndefined,

    #[error("predictor `{model}` returned {got} scores for {expected} test rows")]
    WrongLength {
        model: String,
        got: usize,
        expected: usize,
    },

    #[error("predictor `{model}` returned a non-finite or out-of-range score at row {row}")]
    InvalidScore { model: String, row: usize },

    #[error("logistic regression diverged at step {step}")]
    Diverged { step: u64 },

    #[error("non-finite activation in block {block}")]
    NonFiniteActivation { block: usize },

    #[error("non-finite loss at episode {episode}")]
    NonFiniteLoss { episode: u64 },

    #[error("table width {width} plus label cell exceeds max_features {max}")]
    WidthOverflow { width: usize, max: usize },

    #[error("degenerate episode: single-class query labels after {attempts} attempts (seed {seed})")]
    DegenerateEpisode { seed: u64, attempts: u32 },

    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: String, expected: String },

    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
