use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode raster {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("invalid manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dimension mismatch in {what}: expected {expected_h}x{expected_w}, found {found_h}x{found_w}")]
    DimensionMismatch {
        what: String,
        expected_h: usize,
        expected_w: usize,
        found_h: usize,
        found_w: usize,
    },

    #[error("layer {path} contains non-binary pixel value {value}")]
    NonBinaryLayer { path: PathBuf, value: u8 },

    #[error("region {region} does not fit inside a {height}x{width} raster")]
    OutOfBounds {
        region: String,
        height: usize,
        width: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("spatial size {height}x{width} is not divisible by {divisor}")]
    IndivisibleSize {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("layer count mismatch: model expects {expected}, input has {found}")]
    LayerCountMismatch { expected: usize, found: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("average precision is undefined without positive labels")]
    NoPositiveLabels,

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class. Codes are stable across releases.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Decode { .. } => 4,
            Error::Manifest { .. } => 5,
            Error::Config(_) => 2,
            Error::DimensionMismatch { .. } => 6,
            Error::NonBinaryLayer { .. } => 7,
            Error::OutOfBounds { .. } => 8,
            Error::InvalidArgument(_) => 9,
            Error::ClassOutOfRange { .. } => 10,
            Error::IndivisibleSize { .. } => 11,
            Error::LayerCountMismatch { .. } => 12,
            Error::Empty(_) => 13,
            Error::NoPositiveLabels => 14,
            Error::Checkpoint(_) => 15,
        }
    }
}
