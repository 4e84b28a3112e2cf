//! Shared error type for the seatwin library.

use std::fmt;

/// Errors surfaced by the library.
///
/// `FailureEscalation` is special: it marks a numerically degenerate batch
/// (Cholesky failure at the maximum allowed jitter). The training loop treats
/// it as batch-local and discards the batch rather than aborting.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A coordinate or feature fell outside its declared range.
    OutOfRange {
        what: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    /// An array had the wrong length or a matrix the wrong dimensions.
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    /// Cholesky factorization failed at every jitter level up to the cap.
    FailureEscalation { jitter_cap: f64 },
    /// A query point fell outside a gridded bathymetry field.
    OutOfGrid { lat: f64, lon: f64 },
    /// A file did not parse as the expected format.
    FormatError { path: String, detail: String },
    /// A model file carried an unsupported format version.
    VersionMismatch { found: u32, supported: u32 },
    /// Invalid configuration value.
    Config(String),
    /// Underlying I/O failure.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::OutOfRange {
                what,
                value,
                min,
                max,
            } => write!(f, "{what} = {value} outside [{min}, {max}]"),
            Error::ShapeMismatch {
                what,
                expected,
                got,
            } => write!(f, "{what}: expected length {expected}, got {got}"),
            Error::FailureEscalation { jitter_cap } => {
                write!(
                    f,
                    "Cholesky factorization failed up to jitter {jitter_cap:e}; batch is degenerate"
                )
            }
            Error::OutOfGrid { lat, lon } => {
                write!(f, "point ({lat}, {lon}) outside bathymetry grid")
            }
            Error::FormatError { path, detail } => write!(f, "malformed file {path}: {detail}"),
            Error::VersionMismatch { found, supported } => {
                write!(f, "model format version {found} unsupported (supported: {supported})")
            }
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Io(msg) => write!(f, "I/O error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
