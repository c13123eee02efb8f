use std::path::PathBuf;

use crate::types::ClassId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid box {field}: {detail}")]
    InvalidBox { field: &'static str, detail: String },

    #[error("class split overlaps on {0:?}")]
    OverlappingSplit(Vec<ClassId>),

    #[error("duplicate support class {class} in support_classes")]
    DuplicateSupportClass { class: ClassId },

    #[error("support_sets[{class}] has {found} examples, expected {expected}")]
    ShotCountMismatch {
        class: ClassId,
        expected: usize,
        found: usize,
    },

    #[error("box out of bounds in {field}: {detail}")]
    BoxOutOfBounds { field: String, detail: String },

    #[error("encoding_map does not match support_classes")]
    EncodingMapMismatch,

    #[error("degenerate box pair: both boxes have zero area")]
    DegenerateBox,

    #[error("assignment is not a permutation of 0..{n}")]
    AssignmentInvalid { n: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite matching cost at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },

    #[error("{count} objects exceed the {slots} prediction slots")]
    TooManyObjects { count: usize, slots: usize },

    #[error("unknown encoding index {index} (valid: 1..={max})")]
    UnknownEncodingIndex { index: usize, max: usize },

    #[error("task encoding dimension {0} is odd")]
    OddDimension(usize),

    #[error("instance box maps to no feature cell")]
    EmptyRegion,

    #[error("image {height}x{width} is smaller than the {min}px minimum")]
    ImageTooSmall { height: usize, width: usize, min: usize },

    #[error("no support examples for class {0}")]
    MissingClassSupport(ClassId),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("need {needed} classes but only {available} are available")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("class {class} has {available} usable instances, need {needed}")]
    InsufficientShots {
        class: ClassId,
        needed: usize,
        available: usize,
    },

    #[error("checkpoint stage is `{found}`, expected `{expected}`")]
    StageMismatch { expected: String, found: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
