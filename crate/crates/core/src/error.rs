use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Variants map one-to-one onto the failure classes the commands report, so
/// the CLI can derive a stable machine-readable `kind` from them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("degenerate histogram: {0}")]
    DegenerateHistogram(String),

    #[error("no tissue: {0}")]
    NoTissue(String),

    #[error("empty tiling: extent {width}x{height} is smaller than tile {tile_px}")]
    EmptyTiling { width: u32, height: u32, tile_px: u32 },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("incomplete predictions, missing slides: {}", .0.join(", "))]
    Completeness(Vec<String>),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format { .. } => "format",
            Error::Integrity(_) => "integrity",
            Error::Range(_) => "range",
            Error::Capability(_) => "capability",
            Error::DegenerateHistogram(_) => "degenerate_histogram",
            Error::NoTissue(_) => "no_tissue",
            Error::EmptyTiling { .. } => "empty_tiling",
            Error::Configuration(_) => "configuration",
            Error::Shape(_) => "shape",
            Error::Argument(_) => "argument",
            Error::Numeric(_) => "numeric",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Completeness(_) => "completeness",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Image { .. } => "image",
        }
    }

    /// Whether the failure stems from user input (bad files, bad config)
    /// rather than an internal fault.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Numeric(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Reads and parses a JSON file.
pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes a value as pretty JSON with a trailing newline.
pub(crate) fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
