use thiserror::Error;

/// Crate-wide error type for fallible operations outside the projection
/// hot path (which uses [`crate::geometry::ProjectionError`] as a signal).
#[derive(Debug, Error)]
pub enum Error {
    #[error("no point of the input cloud falls inside the configured range")]
    EmptyCloud,

    #[error("grid index {index} on axis {axis} exceeds the {bits}-bit curve budget")]
    IndexOverflow { axis: char, index: u64, bits: u32 },

    #[error("partial projection found no image patch with incident LiDAR points")]
    NoIncidence,

    #[error("densification requires level_z = 1, got {level_z}")]
    LevelMismatch { level_z: u32 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: malformed {what}")]
    MalformedFile { path: String, what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
