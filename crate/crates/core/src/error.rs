use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the domain of a measurement function or inverse.
    #[error("domain error: {0}")]
    Domain(String),

    /// A scenario, experiment or CLI configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// One or more required keys are absent from a configuration file.
    #[error("config error: missing keys: {}", .0.join(", "))]
    MissingKeys(Vec<String>),

    /// A linear-algebra step failed (singular or non-PSD matrix, underflow).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The geometry does not determine the requested quantity.
    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    /// Paired inputs have different lengths.
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    /// A node produced no detections, so no track can be started.
    #[error("node {0} has no detections")]
    EmptyTrack(usize),

    /// A pipeline stage needed by a later stage has no output on disk.
    #[error("missing stage output `{stage}` at {}", path.display())]
    MissingStage { stage: String, path: PathBuf },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
