use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {0} has (near) zero norm and cannot be normalized")]
    ZeroRow(usize),
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("batch has no valid pairs")]
    NoValidPairs,
    #[error("batch has no valid triplets")]
    NoValidTriplets,

    #[error("target list is empty")]
    EmptyTargetList,
    #[error("list of similarity matrices is empty")]
    EmptyList,
    #[error("class `{0}` is missing from the external target matrix")]
    MissingClassInExternalMatrix(String),

    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("k = {k} exceeds the number of available classes ({available})")]
    KTooLarge { k: usize, available: usize },
    #[error("pseudolabel `{0}` has no language embedding")]
    MissingPseudoName(String),
    #[error("key `{0}` has no pseudolabel assignment")]
    MissingAssignment(String),

    #[error("need {needed} classes with samples, found {available}")]
    InsufficientClasses { needed: usize, available: usize },
    #[error("guidance input missing: {0}")]
    GuidanceInputMissing(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("unknown loss `{0}`")]
    UnknownLoss(String),

    #[error("k = {k} exceeds gallery size {gallery}")]
    KExceedsGallery { k: usize, gallery: usize },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("class `{0}` has no language embedding")]
    MissingClassName(String),

    #[error("bad magic in {path:?}")]
    BadMagic { path: PathBuf },
    #[error("unsupported matrix file version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown dtype tag {0}")]
    BadDtype(u16),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("non-finite value at flat index {0}")]
    NonFiniteValue(usize),
    #[error("count mismatch: {what} has {found} entries, expected {expected}")]
    CountMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("degenerate synthetic spec: {0}")]
    DegenerateSpec(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error in {path:?}: {detail}")]
    Parse { path: PathBuf, detail: String },

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
