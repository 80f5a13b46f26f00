//! Crate-wide error type.

use thiserror::Error;

/// Errors reported by the segmentation and grading pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("class index {index} out of range (num_classes = {num_classes})")]
    ClassIndexOutOfRange { index: usize, num_classes: usize },

    #[error("unregistered mask color ({},{},{}){}", .rgb[0], .rgb[1], .rgb[2],
        .pos.map(|(x, y)| format!(" at pixel ({x},{y})")).unwrap_or_default())]
    UnregisteredColor {
        rgb: [u8; 3],
        pos: Option<(u32, u32)>,
    },

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("unknown loss selector {0:?} (expected cross_entropy, dice, focal_tversky or hybrid)")]
    UnknownLossSelector(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("scan id mismatch: missing from predictions: {missing_predicted:?}; missing from truth: {missing_truth:?}")]
    ScanIdMismatch {
        missing_predicted: Vec<String>,
        missing_truth: Vec<String>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<String>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ClassIndexOutOfRange { .. } => "class_index_out_of_range",
            Error::UnregisteredColor { .. } => "unregistered_color",
            Error::InvalidDimension(_) => "invalid_dimension",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::EmptyInput(_) => "empty_input",
            Error::UnknownLossSelector(_) => "unknown_loss_selector",
            Error::Manifest(_) => "manifest",
            Error::Checkpoint(_) => "checkpoint",
            Error::ScanIdMismatch { .. } => "scan_id_mismatch",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
