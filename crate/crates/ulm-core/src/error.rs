use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by the localization, registration, and rendering pipeline.
#[derive(Debug, Error)]
pub enum UlmError {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A stack, map, or CSV file that does not follow its on-disk layout.
    /// `offset` is the byte position of the first offending field.
    #[error("format error in {path} at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{op}: {window}x{window} window around ({row}, {col}) exceeds frame bounds {height}x{width}")]
    WindowOutOfBounds {
        op: &'static str,
        window: usize,
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    /// A constant patch carries no structure to correlate against.
    #[error("zero-energy patch: constant window has no structure to correlate")]
    ZeroEnergy,

    /// A probability matrix row or column with no positive entry, i.e. a
    /// bubble with no candidate partner on the other frame.
    #[error("probability matrix has an all-zero {axis} {index}: bubble {index} has no candidate partner")]
    Orphan { axis: &'static str, index: usize },

    /// An argument that violates a documented call contract.
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, UlmError>;
