//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Argument outside a function's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Structurally invalid input (bad dimensions, missing data, broken invariant).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A mixture component collapsed (vanishing mixing proportion).
    #[error("degenerate mixture component {index}: pi = {pi:.3e}")]
    DegenerateComponent { index: usize, pi: f64 },

    /// An internal numerical invariant failed; indicates a bug, not bad data.
    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Nifti(#[from] NiftiError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Errors specific to the NIfTI-1 reader/writer.
#[derive(Error, Debug)]
pub enum NiftiError {
    #[error("bad magic {0:?}: not a NIfTI-1 single file")]
    BadMagic([u8; 4]),

    #[error("paired NIfTI files (magic \"ni1\\0\") are not supported; use single-file .nii")]
    PairedUnsupported,

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("truncated volume data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("malformed header: {0}")]
    BadHeader(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
