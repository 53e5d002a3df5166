use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the simulator library.
#[derive(Debug)]
pub enum Error {
    /// Two vectors (or matrices) that must agree in length do not.
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    /// Layered parameter shapes differ (layer count, name or width).
    ShapeMismatch { context: &'static str, detail: String },
    /// An operation was asked to produce zero items.
    EmptyRequest(&'static str),
    /// A correlation magnitude at or above 1, where mutual information diverges.
    Divergence { context: &'static str, value: f64 },
    /// A contrastive batch too small to carry negative pairs.
    BatchTooSmall { needed: usize, got: usize },
    /// A check was invoked on inputs that violate its stated preconditions.
    Precondition(String),
    /// Rank statistics need a minimum number of points.
    TooFewPoints { needed: usize, got: usize },
    /// A probe-training split ended up with fewer than two classes.
    DegenerateSplit { attempts: usize },
    /// Training produced a non-finite parameter or gradient.
    NonFinite { round: usize, detail: String },
    /// Configuration file could not be parsed.
    Config { line: usize, message: String },
    /// Command line was malformed.
    Usage(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch { context, expected, got } => {
                write!(f, "{context}: dimension mismatch (expected {expected}, got {got})")
            }
            Error::ShapeMismatch { context, detail } => {
                write!(f, "{context}: layer shape mismatch: {detail}")
            }
            Error::EmptyRequest(what) => write!(f, "empty request: {what}"),
            Error::Divergence { context, value } => {
                write!(
                    f,
                    "{context}: correlation magnitude {value} leaves mutual information undefined"
                )
            }
            Error::BatchTooSmall { needed, got } => {
                write!(f, "batch too small: need at least {needed} samples, got {got}")
            }
            Error::Precondition(msg) => write!(f, "precondition violated: {msg}"),
            Error::TooFewPoints { needed, got } => {
                write!(f, "rank correlation needs at least {needed} points, got {got}")
            }
            Error::DegenerateSplit { attempts } => {
                write!(f, "probe split degenerate after {attempts} reshuffles")
            }
            Error::NonFinite { round, detail } => {
                write!(f, "non-finite value at round {round}: {detail}")
            }
            Error::Config { line, message } => write!(f, "config line {line}: {message}"),
            Error::Usage(msg) => write!(f, "{msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
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
