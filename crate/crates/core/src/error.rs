//! Crate-wide error type.
//!
//! Library code reports failures through [`SstError`]; the CLI maps the
//! variants onto exit codes (config/validation problems exit 2, runtime
//! failures exit 1).

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the SST library.
#[derive(Debug, Error)]
pub enum SstError {
    /// A configuration or precondition violation: bad shapes, inconsistent
    /// label domains, invalid hyperparameters, malformed manifests.
    #[error("config error: {0}")]
    Config(String),

    /// A shape mismatch detected at a public API boundary.
    #[error("shape error: {0}")]
    Shape(String),

    /// A label raster contained a value outside the domain's range.
    #[error("label {value} at ({x}, {y}) out of range for domain with {num_labels} labels")]
    LabelOutOfRange {
        value: u16,
        x: usize,
        y: usize,
        num_labels: usize,
    },

    /// An I/O failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file parsed but its contents were not what was expected.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// A checkpoint was structurally valid but incompatible with the request
    /// (missing component, registry mismatch, wrong tensor shapes).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A numeric failure at runtime (non-finite loss or gradient); names the
    /// offending quantity so divergence is diagnosable from the message.
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl SstError {
    /// Helper for attaching a path to an `io::Error`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SstError::Io {
            path: path.into(),
            source,
        }
    }

    /// Helper for format errors.
    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        SstError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True when the error indicates invalid user input (config, CLI values,
    /// malformed domain files) rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            SstError::Config(_) | SstError::Shape(_) | SstError::Format { .. }
        )
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, SstError>;
