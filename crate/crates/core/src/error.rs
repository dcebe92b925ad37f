//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the numerical substrate, the model modules, and the
/// experiment harness.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Shapes passed to an operation are incompatible.
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    /// A vector with near-zero norm was passed where a direction is required.
    #[error("zero-norm vector in {0}")]
    ZeroVector(&'static str),
    /// Backward was asked to start from a node that is not on the tape.
    #[error("node is not on this tape")]
    DetachedNode,
    /// Weights expected to lie on the probability simplex do not.
    #[error("weights off the probability simplex (sum = {sum})")]
    SimplexViolation { sum: f64 },
    /// A memory pool modality has no prototypes.
    #[error("memory pool is empty for the {modality} modality")]
    EmptyPool { modality: &'static str },
    /// Requested more prototypes than the pool holds.
    #[error("k = {k} exceeds pool size {size}")]
    KTooLarge { k: usize, size: usize },
    /// Prototype index outside the pool.
    #[error("prototype index {index} out of range (pool size {size})")]
    IndexOutOfRange { index: usize, size: usize },
    /// Interpolation factor outside [0, 1].
    #[error("lambda = {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
    /// Answer token id outside the vocabulary.
    #[error("answer token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    /// Evaluation was requested on an empty test set.
    #[error("test set is empty")]
    EmptyTestSet,
    /// A metric needs accuracy-matrix entries that were never recorded.
    #[error("accuracy matrix incomplete: missing entry ({row}, {col})")]
    IncompleteMatrix { row: usize, col: usize },
    /// An accuracy-matrix cell was written twice.
    #[error("accuracy matrix entry ({row}, {col}) already recorded")]
    DuplicateEntry { row: usize, col: usize },
    /// A training step failed; carries the step index for triage.
    #[error("training step {index} failed: {source}")]
    Step {
        index: u64,
        #[source]
        source: Box<Error>,
    },
    /// Average forgetting is undefined for a single task.
    #[error("average forgetting undefined for a single-task stream")]
    SingleTask,
    /// A data or checkpoint file failed to parse.
    #[error("parse error at record {record}: {message}")]
    Parse { record: usize, message: String },
    /// Ingested data disagrees with the declared dimensions.
    #[error("shape mismatch in ingested data: {0}")]
    ShapeMismatch(String),
    /// An experiment configuration failed validation.
    #[error("invalid config: field `{field}`: {message}")]
    ConfigInvalid { field: String, message: String },
    /// Filesystem failure while reading or writing artifacts.
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    pub(crate) fn dims(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, err: &std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}
