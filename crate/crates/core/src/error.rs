use std::io;

use thiserror::Error;

/// Everything that can go wrong inside the library.
///
/// Variants are grouped so a front-end can map them onto exit codes:
/// configuration mistakes, bad input data or files, and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite coordinate in trajectory {id:?} at point {index}")]
    NonFinite { id: String, index: usize },

    #[error("coordinate out of range in trajectory {id:?} at point {index}: lon={lon}, lat={lat}")]
    OutOfRange {
        id: String,
        index: usize,
        lon: f64,
        lat: f64,
    },

    #[error("trajectory {id:?} too short: {len} points, need at least {min}")]
    TooShort { id: String, len: usize, min: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported format version {found} (this build reads up to {supported})")]
    Version { found: u32, supported: u32 },

    #[error("measure failed on pair ({a}, {b}): {message}")]
    Pair { a: String, b: String, message: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for errors caused by malformed data or files rather than by the caller.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::OutOfRange { .. }
                | Error::Parse { .. }
                | Error::Format(_)
                | Error::Version { .. }
                | Error::Pair { .. }
                | Error::TooShort { .. }
                | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
