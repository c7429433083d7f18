//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{name} = {extent} is not divisible by patch size {patch}")]
    Indivisible {
        name: &'static str,
        extent: usize,
        patch: usize,
    },

    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("crop {crop_h}x{crop_w} exceeds source {src_h}x{src_w}")]
    CropTooLarge {
        crop_h: usize,
        crop_w: usize,
        src_h: usize,
        src_w: usize,
    },

    #[error("requested {requested} samples but the region holds only {available}")]
    RegionExhausted { requested: usize, available: usize },

    #[error("sampling region is empty")]
    EmptyRegion,

    #[error("start index ({row}, {col}) lies outside the sampling region")]
    StartOutsideRegion { row: usize, col: usize },

    #[error("degenerate token mask: {agent} agent tokens, {environment} environment tokens")]
    DegenerateMask { agent: usize, environment: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("layer {layer} out of range (model has {layers} layers)")]
    LayerOutOfRange { layer: usize, layers: usize },

    #[error("forward record does not match: {0}")]
    RecordMismatch(String),

    #[error("agent did not fit in frame after {attempts} placement attempts")]
    AgentOutOfFrame { attempts: usize },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Malformed(String),
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
