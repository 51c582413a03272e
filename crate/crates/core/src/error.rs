use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("similarity query text is empty")]
    EmptyText,
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("label index {index} out of range for {n_classes} classes")]
    LabelOutOfRange { index: usize, n_classes: usize },
    #[error("timestep {t} out of range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("unsupported image dimension {0}; expected 256 or 512")]
    UnsupportedImageDim(usize),
    #[error("resolution mismatch: classifier expects {expected}x{expected}, got {height}x{width}")]
    ResolutionMismatch {
        expected: usize,
        height: usize,
        width: usize,
    },
    #[error("paired-seed integrity violated: {0}")]
    PairingMismatch(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Archive(#[from] bincode::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
