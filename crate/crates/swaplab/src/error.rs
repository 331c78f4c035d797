//! Crate-wide error type.

use thiserror::Error;

/// Unified error for every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum SwapLabError {
    /// A factor value fell outside its documented closed interval.
    #[error("factor `{name}` = {value} outside [{lo}, {hi}]")]
    InvalidFactor {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    /// Schedule construction or lookup was handed invalid parameters.
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    /// A numeric guard tripped (division floor, zero norm, non-finite value).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Shapes or configuration fields are inconsistent.
    #[error("shape/config error: {0}")]
    Shape(String),

    /// Oracle encoder training exhausted its budget before reaching the target.
    #[error(
        "oracle training missed target: factor `{factor}` validation RMSE {rmse:.5} > {target:.5}"
    )]
    OracleTarget {
        factor: String,
        rmse: f64,
        target: f64,
    },

    /// Training aborted because a loss or gradient stopped being finite.
    #[error("non-finite training state at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    /// Checkpoint container failed validation.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A manifest or record failed validation.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// Underlying I/O failure.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// PNG encode/decode failure.
    #[error("image error on {path}: {detail}")]
    Image { path: String, detail: String },

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Anything the CLI wants to fail with that has no structured form.
    #[error("{0}")]
    Other(String),
}

impl SwapLabError {
    /// Convenience constructor for I/O errors tagged with the offending path.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        SwapLabError::Io {
            path: path.into(),
            source,
        }
    }
}
