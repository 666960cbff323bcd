//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Invalid configuration: bad dimensions, malformed schedule or strategy
    /// strings, out-of-range ratios.
    Config(String),
    /// A softmax row contained no finite entry.
    EmptySoftmaxSupport { row: usize },
    /// An internal invariant was violated (conservation drift, non-positive
    /// mixed size, column-sum drift in the assignment matrix).
    Invariant(String),
    Io(std::io::Error),
    /// Weight container does not start with the expected magic bytes.
    BadMagic,
    /// Weight container ended before the declared contents.
    Truncated,
    /// A tensor required by the model configuration is missing.
    IncompleteWeights { missing: String },
    /// A stored tensor's shape disagrees with the model configuration.
    ShapeMismatch {
        name: String,
        expected: Vec<u64>,
        got: Vec<u64>,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::EmptySoftmaxSupport { row } => {
                write!(f, "empty softmax support in row {row}")
            }
            Error::Invariant(msg) => write!(f, "invariant violation: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::BadMagic => write!(f, "bad magic: not a VMTW weight container"),
            Error::Truncated => write!(f, "truncated weight container"),
            Error::IncompleteWeights { missing } => {
                write!(f, "incomplete weight set: missing tensor \"{missing}\"")
            }
            Error::ShapeMismatch {
                name,
                expected,
                got,
            } => write!(
                f,
                "shape mismatch for tensor \"{name}\": expected {expected:?}, got {got:?}"
            ),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated
        } else {
            Error::Io(e)
        }
    }
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration/input problems,
    /// 1 for violated assertions.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Invariant(_) | Error::EmptySoftmaxSupport { .. } => 1,
            _ => 2,
        }
    }
}
