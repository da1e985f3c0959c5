use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("direction is not unit length (|d| = {0})")]
    NonUnitDirection(f64),
    #[error("unsupported spherical harmonics degree {0} (max 3)")]
    UnsupportedDegree(usize),
    #[error("resolution mismatch: {0}x{1} vs {2}x{3}")]
    ResolutionMismatch(usize, usize, usize, usize),
    #[error("backward pass requires auxiliary data retained by the forward pass")]
    MissingAux,
    #[error("mask {0} is empty")]
    EmptyMask(usize),
    #[error("mask weights must sum to 1 (got {0})")]
    WeightSum(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("unknown layout face group `{name}` (valid: {valid})")]
    UnknownFaceGroup { name: String, valid: String },
    #[error("malformed mask file: {0}")]
    MaskFormat(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint scalar width is {found} bytes, expected {expected}")]
    ScalarWidth { found: usize, expected: usize },
    #[error("invalid mesh: {0}")]
    Mesh(String),
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("missing masks for view `{0}` (required once the mask loss is active)")]
    MissingMasks(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml parse error: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("toml write error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
