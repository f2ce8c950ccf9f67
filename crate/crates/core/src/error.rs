//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (non-positive physical limits,
    /// bad schedule, infeasible initialization, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A value fell outside its mathematical domain, e.g. a sample point
    /// outside the normalized k-space square.
    #[error("domain error: {0}")]
    Domain(String),

    /// Array dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A loss or gradient evaluated to NaN/inf.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A trajectory violates the hardware constraints where feasibility is
    /// required (waveform export).
    #[error("infeasible trajectory: box {box_violation:.3e}, speed {speed_violation:.3e}, accel {accel_violation:.3e}")]
    Infeasible {
        box_violation: f64,
        speed_violation: f64,
        accel_violation: f64,
    },

    /// Malformed on-disk data (bad magic, truncated payload, ...).
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
