//! Error types shared across the crate.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Distinct codes for dataset-validation failures. Each violated invariant
/// maps to exactly one code so callers can discriminate failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationCode {
    ZeroNormClassSemantic,
    NonFiniteSemantics,
    SeenUnseenOverlap,
    LabelOutOfRange,
    TrainLabelNotSeen,
    TestSeenLabelNotSeen,
    TestUnseenLabelNotUnseen,
    IdListsOverlap,
    ImageIdOutOfRange,
    FeatureLabelCountMismatch,
    LevelShapeMismatch,
    NonFiniteFeatures,
    RefLevelOutOfRange,
    AttributeNameCountMismatch,
    EmptyClassSemantics,
}

impl fmt::Display for ValidationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValidationCode::ZeroNormClassSemantic => "zero-norm class semantic",
            ValidationCode::NonFiniteSemantics => "non-finite class semantics",
            ValidationCode::SeenUnseenOverlap => "seen/unseen class sets overlap",
            ValidationCode::LabelOutOfRange => "label references unknown class",
            ValidationCode::TrainLabelNotSeen => "train image labelled with unseen class",
            ValidationCode::TestSeenLabelNotSeen => "test-seen image labelled with unseen class",
            ValidationCode::TestUnseenLabelNotUnseen => {
                "test-unseen image labelled with seen class"
            }
            ValidationCode::IdListsOverlap => "split id lists overlap",
            ValidationCode::ImageIdOutOfRange => "image id out of range",
            ValidationCode::FeatureLabelCountMismatch => "feature count does not match label count",
            ValidationCode::LevelShapeMismatch => "level shape inconsistent with descriptor",
            ValidationCode::NonFiniteFeatures => "non-finite feature values",
            ValidationCode::RefLevelOutOfRange => "reference level index out of range",
            ValidationCode::AttributeNameCountMismatch => {
                "attribute name count does not match semantics width"
            }
            ValidationCode::EmptyClassSemantics => "class semantic matrix is empty",
        };
        f.write_str(s)
    }
}

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor/matrix shape disagreement. `op` names the operation.
    Shape { op: &'static str, detail: String },
    /// A kernel produced or received a non-finite value.
    NumericDomain { op: &'static str, detail: String },
    /// An operation received an empty input it cannot handle.
    EmptyInput(&'static str),
    /// A binary or JSON artifact is malformed. `file` names the offender.
    Format { file: String, detail: String },
    /// A dataset invariant is violated.
    Validation {
        code: ValidationCode,
        file: String,
        index: Option<usize>,
    },
    /// An invalid configuration value.
    Config(String),
    /// A domain precondition failed (bad label, empty class set, ...).
    Domain(String),
    /// The attribute-score vector has zero norm; cosine logits are undefined.
    DegenerateScore,
    /// A loss closure returned different values on repeated evaluation.
    NonDeterministic { first: f64, second: f64 },
    /// Training aborted on a non-finite loss. Carries diagnostics.
    NanLoss {
        epoch: usize,
        batch: usize,
        term: &'static str,
    },
    /// Checkpoint does not match the dataset it is evaluated against.
    ShapeEcho(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::NumericDomain { op, detail } => {
                write!(f, "numeric-domain error in {op}: {detail}")
            }
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::Format { file, detail } => write!(f, "format error in {file}: {detail}"),
            Error::Validation { code, file, index } => match index {
                Some(i) => write!(f, "validation error in {file} at index {i}: {code}"),
                None => write!(f, "validation error in {file}: {code}"),
            },
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::DegenerateScore => {
                write!(f, "degenerate-score error: attribute-score vector has zero norm")
            }
            Error::NonDeterministic { first, second } => write!(
                f,
                "determinism error: loss evaluated to {first} then {second}"
            ),
            Error::NanLoss { epoch, batch, term } => write!(
                f,
                "numeric abort: non-finite loss at epoch {epoch}, batch {batch}, term {term}"
            ),
            Error::ShapeEcho(msg) => write!(f, "checkpoint/dataset shape mismatch: {msg}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
