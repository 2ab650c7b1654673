use std::fmt;

/// The kinds of persisted artifact, used to name the file in decode errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    ModelCheckpoint,
    TargetCache,
    SurrogateCheckpoint,
    Corpus,
    RunConfig,
}

impl fmt::Display for FileKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            FileKind::ModelCheckpoint => "model checkpoint",
            FileKind::TargetCache => "target cache",
            FileKind::SurrogateCheckpoint => "surrogate checkpoint",
            FileKind::Corpus => "corpus",
            FileKind::RunConfig => "run config",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch (expected {expected}, got {got})")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("token {token} outside vocabulary of size {vocab}")]
    OutOfVocab { token: u32, vocab: usize },
    #[error("position {got} does not advance past last cached position {last}")]
    PositionRegression { last: usize, got: usize },
    #[error("{kind}: config hash mismatch (expected {expected:016x}, found {found:016x})")]
    HashMismatch {
        kind: FileKind,
        expected: u64,
        found: u64,
    },
    #[error("{kind}: bad magic bytes")]
    BadMagic { kind: FileKind },
    #[error("{kind}: unsupported version {version}")]
    UnsupportedVersion { kind: FileKind, version: u32 },
    #[error("{kind}: malformed file: {msg}")]
    Malformed { kind: FileKind, msg: String },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { op, expected, got })
    }
}
