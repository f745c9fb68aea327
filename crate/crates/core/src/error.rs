use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}: schema violation at {field}: {message}", path.display())]
    Schema {
        path: PathBuf,
        field: String,
        message: String,
    },

    #[error("rig vertex {vertex}: skinning weights sum to {sum}, expected 1")]
    WeightSum { vertex: usize, sum: f64 },

    #[error("frame {frame}: {what} is {got_w}x{got_h}, camera {camera} expects {want_w}x{want_h}")]
    ResolutionMismatch {
        frame: usize,
        camera: u32,
        what: &'static str,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("non-finite gradient in parameter class {class}")]
    NonFiniteGradient { class: &'static str },

    #[error("non-finite loss at iteration {iteration} (frame {frame})")]
    NonFiniteLoss { iteration: u64, frame: usize },

    #[error("image codec error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// True for failures caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. }
        )
    }
}
