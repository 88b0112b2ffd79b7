use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while reading or writing pipeline inputs and outputs.
#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("field `{field}` is invalid: {reason}")]
    InvalidField { field: String, reason: String },
    #[error("duplicate tile id `{0}`")]
    DuplicateTileId(String),
    #[error("non-positive dimension `{0}`")]
    NonPositiveDimension(String),
    #[error(
        "label map is {actual_width}x{actual_height}, expected {expected_width}x{expected_height}"
    )]
    DimensionMismatch {
        expected_width: u32,
        expected_height: u32,
        actual_width: u32,
        actual_height: u32,
    },
    #[error("label map payload has {actual} bytes, expected {expected}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("label map payload has {actual} bytes, expected {expected}")]
    OversizedPayload { expected: usize, actual: usize },
    #[error("run-length counts sum to {actual}, expected {expected}")]
    CountSumMismatch { expected: u64, actual: u64 },
    #[error("local coordinate ({x}, {y}) is outside the {width}x{height} tile")]
    OutOfTileBounds {
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },
}

impl IngestError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IngestError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        IngestError::Json {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MorphError {
    #[error("contour cannot support an ellipse fit: {0}")]
    DegenerateContour(&'static str),
}

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("sample for group `{group}` property `{property}` is empty")]
    EmptySample { group: String, property: String },
    #[error("group `{group}` has {n} values for `{property}`; at least 2 are required")]
    InsufficientSample {
        group: String,
        property: String,
        n: usize,
    },
    #[error("cannot compare `{a}` with `{b}`: samples describe different properties")]
    PropertyMismatch { a: String, b: String },
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("malformed measurements row {row} in {path}: {reason}")]
    MalformedRow {
        path: PathBuf,
        row: usize,
        reason: String,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ReportError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ReportError::Io {
            path: path.into(),
            source,
        }
    }
}
