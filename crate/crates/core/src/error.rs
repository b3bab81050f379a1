use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has norm below 1e-30 and cannot be normalized")]
    ZeroRow { row: usize },

    #[error("input is empty")]
    EmptyInput,

    #[error("function evaluation was not finite at coordinate {coordinate}")]
    NonFiniteEvaluation { coordinate: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unknown magic bytes {found:?}, expected \"CCRK\"")]
    UnknownMagic { found: Vec<u8> },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("embeddings are not unit-normalized")]
    NotNormalized,

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("mask covers every position; no context tokens remain")]
    AllMasked,

    #[error("token sequence is empty")]
    EmptySequence,

    #[error("rank variance needs at least two languages")]
    SingleLanguage,

    #[error("alignment direction has near-zero length")]
    DegenerateDirection,

    #[error("texts are antipodal; their arc midpoint is undefined")]
    AntipodalTexts,

    #[error("loss became non-finite at step {step}")]
    Divergence { step: usize },

    #[error("gradient check failed: relative error {max_relative_error:e} exceeds {tolerance:e}")]
    GradientMismatch { max_relative_error: f64, tolerance: f64 },
}

impl Error {
    /// Process exit code for this error: 2 for data problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ZeroRow { .. }
            | Error::NonFiniteEvaluation { .. }
            | Error::NonFinite { .. }
            | Error::DegenerateDirection
            | Error::AntipodalTexts
            | Error::Divergence { .. }
            | Error::GradientMismatch { .. } => 3,
            Error::InvalidConfig(_) => 1,
            _ => 2,
        }
    }
}
