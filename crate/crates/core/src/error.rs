use std::fmt;

/// Errors raised by the numeric core, models, planner and harness.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not satisfy an operation's contract.
    Shape { op: &'static str, detail: String },
    /// A value that must be finite was NaN or infinite.
    NonFinite { context: String },
    /// Lookup of a named parameter, factor or task failed.
    Unknown { kind: &'static str, name: String },
    /// Invalid configuration or argument.
    Invalid(String),
    /// Empty input where at least one element is required.
    Empty(String),
    /// A finite task split ran out of tasks.
    Exhausted(String),
    /// File format problems (version mismatch, corruption, truncation).
    Format(String),
    Io(std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn unknown(kind: &'static str, name: impl Into<String>) -> Self {
        Error::Unknown { kind, name: name.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape mismatch in `{op}`: {detail}"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Unknown { kind, name } => write!(f, "unknown {kind} `{name}`"),
            Error::Invalid(msg) => write!(f, "invalid: {msg}"),
            Error::Empty(msg) => write!(f, "empty input: {msg}"),
            Error::Exhausted(msg) => write!(f, "exhausted: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
