use thiserror::Error;

/// Errors produced by the library.
///
/// Validation problems in a dataset are reported as data by
/// [`crate::domain::validate_dataset`]; the variants here are hard failures.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("all values are zero")]
    AllZero,
    #[error("negative value {value} at ({x}, {y})")]
    NegativeValue { x: usize, y: usize, value: f64 },
    #[error("non-finite value at ({x}, {y})")]
    NonFiniteValue { x: usize, y: usize },
    #[error("negative blur sigma {0}")]
    NegativeSigma(f64),
    #[error("kernel sigma must be > 0, got {0}")]
    InvalidKernel(f64),
    #[error("no points to estimate a density from")]
    EmptyPoints,
    #[error("zero density at fixation {index} of train ({image_id}, {subject_id}) at pixel ({px}, {py})")]
    ZeroDensityAtFixation {
        image_id: String,
        subject_id: String,
        index: usize,
        px: usize,
        py: usize,
    },
    #[error("image mismatch: expected {expected}, found {found}")]
    ImageMismatch { expected: String, found: String },
    #[error("grid shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("degenerate bounds: gold {gold} <= baseline {baseline}")]
    DegenerateBounds { baseline: f64, gold: f64 },
    #[error("histogram baseline needs at least 2 images")]
    SingleImage,
    #[error("empty hyperparameter grid: {0}")]
    EmptyGrids(&'static str),
    #[error("need at least 2 subjects, found {0}")]
    TooFewSubjects(usize),
    #[error("invalid fold count {folds} for {subjects} subjects")]
    InvalidFolds { folds: usize, subjects: usize },
    #[error("no gold-standard grid for image {image_id}, subject {subject_id}")]
    MissingGrid { image_id: String, subject_id: String },
    #[error("model {0} is constant over all images")]
    ConstantModel(String),
    #[error("value {0} outside the support [0, 1]")]
    OutOfSupport(f64),
    #[error("objective became non-finite")]
    NonFinite,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("empty list: {0}")]
    EmptyList(&'static str),
    #[error("support violation at pixel ({x}, {y})")]
    SupportViolation { x: usize, y: usize },
    #[error("degenerate anchors: gold metric equals baseline metric ({0})")]
    DegenerateAnchors(f64),
    #[error("constant vector: {0}")]
    ConstantVector(&'static str),
    #[error("zero prior at pixel ({x}, {y})")]
    ZeroPrior { x: usize, y: usize },
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("dataset validation failed: {}", .0.join("; "))]
    ValidationFailed(Vec<String>),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },
    #[error("unsupported map format version {0}")]
    VersionUnsupported(u32),
    #[error("missing map for model {model_id}, image {image_id}")]
    MissingMap { model_id: String, image_id: String },
    #[error("io error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::AllZero => "AllZero",
            Error::NegativeValue { .. } => "NegativeValue",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::NegativeSigma(_) => "NegativeSigma",
            Error::InvalidKernel(_) => "InvalidKernel",
            Error::EmptyPoints => "EmptyPoints",
            Error::ZeroDensityAtFixation { .. } => "ZeroDensityAtFixation",
            Error::ImageMismatch { .. } => "ImageMismatch",
            Error::ShapeMismatch(..) => "ShapeMismatch",
            Error::DegenerateBounds { .. } => "DegenerateBounds",
            Error::SingleImage => "SingleImage",
            Error::EmptyGrids(_) => "EmptyGrids",
            Error::TooFewSubjects(_) => "TooFewSubjects",
            Error::InvalidFolds { .. } => "InvalidFolds",
            Error::MissingGrid { .. } => "MissingGrid",
            Error::ConstantModel(_) => "ConstantModel",
            Error::OutOfSupport(_) => "OutOfSupport",
            Error::NonFinite => "NonFinite",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::EmptyList(_) => "EmptyList",
            Error::SupportViolation { .. } => "SupportViolation",
            Error::DegenerateAnchors(_) => "DegenerateAnchors",
            Error::ConstantVector(_) => "ConstantVector",
            Error::ZeroPrior { .. } => "ZeroPrior",
            Error::MissingArtifact(_) => "MissingArtifact",
            Error::UnknownImage(_) => "UnknownImage",
            Error::MalformedHeader(_) => "MalformedHeader",
            Error::MalformedRow { .. } => "MalformedRow",
            Error::ValidationFailed(_) => "ValidationFailed",
            Error::BadMagic(_) => "BadMagic",
            Error::TruncatedFile { .. } => "TruncatedFile",
            Error::VersionUnsupported(_) => "VersionUnsupported",
            Error::MissingMap { .. } => "MissingMap",
            Error::Io(_) => "Io",
            Error::Parse(_) => "Parse",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
