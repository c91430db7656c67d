use thiserror::Error;

/// Every failure the library reports. `code()` gives the stable
/// upper-case identifier used in JSON reports and by the C ABI.
#[derive(Debug, Error)]
pub enum MeritError {
    #[error("index {index:?} out of range for shape {shape:?}")]
    OutOfRange { index: Vec<i64>, shape: Vec<usize> },
    #[error("bad magic: expected \"MRT1\"")]
    BadMagic,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("term {term} has negative stride {stride}; footprint is undefined")]
    NegativeStride { term: usize, stride: i64 },
    #[error("lookup input {input} outside table range [{lo}, {hi}]")]
    LutRange { input: f64, lo: f64, hi: f64 },
    #[error("division by zero")]
    DivByZero,
    #[error("scratchpad overflow on input {input}: {needed} bytes > capacity {capacity}")]
    ScratchpadOverflow { input: usize, needed: usize, capacity: usize },
    #[error("index {index:?} falls outside the staged footprint")]
    OutOfFootprint { index: Vec<i64> },
    #[error("extent {extent} is not divisible by {factor}")]
    Indivisible { extent: usize, factor: usize },
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("not a permutation: {0}")]
    InvalidPermutation(String),
    #[error("invalid program: {0}")]
    InvalidProgram(String),
    #[error("invalid view spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid tiling: {0}")]
    InvalidTiling(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MeritError {
    pub fn code(&self) -> &'static str {
        match self {
            MeritError::OutOfRange { .. } => "OUT_OF_RANGE",
            MeritError::BadMagic => "BAD_MAGIC",
            MeritError::TruncatedPayload { .. } => "TRUNCATED_PAYLOAD",
            MeritError::UnknownDtype(_) => "UNKNOWN_DTYPE",
            MeritError::NegativeStride { .. } => "NEGATIVE_STRIDE",
            MeritError::LutRange { .. } => "LUT_RANGE",
            MeritError::DivByZero => "DIV_BY_ZERO",
            MeritError::ScratchpadOverflow { .. } => "SCRATCHPAD_OVERFLOW",
            MeritError::OutOfFootprint { .. } => "OUT_OF_FOOTPRINT",
            MeritError::Indivisible { .. } => "INDIVISIBLE",
            MeritError::UnknownTemplate(_) => "UNKNOWN_TEMPLATE",
            MeritError::BadParams(_) => "BAD_PARAMS",
            MeritError::InvalidPermutation(_) => "INVALID_PERMUTATION",
            MeritError::InvalidProgram(_) => "INVALID_PROGRAM",
            MeritError::InvalidSpec(_) => "INVALID_SPEC",
            MeritError::ShapeMismatch(_) => "SHAPE_MISMATCH",
            MeritError::InvalidTiling(_) => "INVALID_TILING",
            MeritError::Io(_) => "IO",
            MeritError::Json(_) => "JSON",
        }
    }
}

pub type Result<T, E = MeritError> = std::result::Result<T, E>;
