use std::path::PathBuf;

use crate::svr::SvrModel;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("file is empty (missing header)")]
    EmptyFile,

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("cohesion level {0} out of range 0..=3")]
    LevelOutOfRange(i64),

    #[error("duplicate image id `{0}`")]
    DuplicateId(String),

    #[error("non-finite input value")]
    NonFiniteInput,

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("SMO did not converge after {iterations} updates (violation {violation:.3e})")]
    DidNotConverge {
        iterations: usize,
        violation: f64,
        /// Best iterate reached before the update budget ran out.
        model: Box<SvrModel>,
    },

    #[error("infeasible dual point: {0}")]
    InfeasiblePoint(String),

    #[error("no features available for modality `{0}`")]
    NoFeaturesForModality(String),

    #[error("modality mismatch: {0}")]
    ModalityMismatch(String),

    #[error("bad grid step {0}: must be in (0, 1] and divide 1")]
    BadStep(f64),

    #[error("empty validation set")]
    EmptyValidationSet,

    #[error("empty ground truth")]
    EmptyTruth,

    #[error("missing prediction for image `{0}`")]
    MissingPrediction(String),

    #[error("missing label for image `{0}`")]
    MissingLabel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn malformed(line: usize, reason: impl Into<String>) -> Self {
        Error::MalformedRecord {
            line,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
