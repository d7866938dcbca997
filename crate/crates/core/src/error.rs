use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("malformed {what} in {path}: {message}")]
    Parse {
        what: &'static str,
        path: PathBuf,
        message: String,
    },

    #[error("image {image_id}: box {x},{y},{w},{h} lies outside the {width}x{height} image")]
    BoxOutOfBounds {
        image_id: String,
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        width: u32,
        height: u32,
    },

    #[error("duplicate image id {0} in manifest")]
    DuplicateImageId(String),

    #[error("box has zero area")]
    ZeroAreaBox,

    #[error("patch {x},{y} {w}x{h} is outside the {width}x{height} image")]
    PatchOutOfBounds {
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },

    #[error("no feasible patch placement in a {width}x{height} image")]
    NoFeasiblePatch { width: u32, height: u32 },

    #[error("empty pixel set")]
    EmptyPixels,

    #[error("histogram layouts differ: {0}x{1} vs {2}x{3}")]
    HistogramLayout(usize, usize, usize, usize),

    #[error("histogram has zero total count")]
    EmptyHistogram,

    #[error("background pool has {pool} patches but k = {k}")]
    PoolTooSmall { pool: usize, k: usize },

    #[error("background model is degenerate (maxscore = 0)")]
    DegenerateBackground,

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite {term} loss at epoch {epoch}, batch {batch}")]
    NonFinite {
        term: &'static str,
        epoch: usize,
        batch: usize,
        dump: Option<PathBuf>,
    },

    #[error("training diverged after epoch {last_finite_epoch}: {cause}")]
    Diverged {
        cause: Box<Error>,
        last_finite_epoch: usize,
        checkpoint: Box<crate::embedding::Checkpoint>,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("patch {0} not found in pool")]
    UnknownPatch(String),

    #[error("output directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Stable short name for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Parse { .. } | Error::Json { .. } => "parse",
            Error::BoxOutOfBounds { .. } | Error::DuplicateImageId(_) | Error::ZeroAreaBox => "dataset",
            Error::PatchOutOfBounds { .. } | Error::NoFeasiblePatch { .. } | Error::EmptyPixels => "patch",
            Error::HistogramLayout(..) | Error::EmptyHistogram => "histogram",
            Error::PoolTooSmall { .. } | Error::DegenerateBackground => "background",
            Error::Shape { .. } => "shape",
            Error::Config(_) => "config",
            Error::NonFinite { .. } | Error::Diverged { .. } => "diverged",
            Error::EmptyDataset => "empty_dataset",
            Error::UnknownPatch(_) => "unknown_patch",
            Error::Locked(_) => "locked",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: &'static str, path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            what,
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Display, got: impl std::fmt::Display) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
