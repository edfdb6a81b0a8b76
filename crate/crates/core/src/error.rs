//! Error type shared across the crate.

use thiserror::Error;

/// Everything that can go wrong while loading traces, training policies,
/// or assembling a sweep.
#[derive(Debug, Error)]
pub enum Error {
    #[error("topology is not a DAG (cycle through stage `{0}`)")]
    CyclicTopology(String),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("unknown stage id `{0}`")]
    UnknownStageId(String),
    #[error("example `{example}` is missing a record for stage `{stage}`")]
    MissingStageRecord { example: String, stage: String },
    #[error("malformed trace line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("trace file contains no examples")]
    EmptyDataset,
    #[error("stage `{stage}` has feature dimension {found}, expected {expected}")]
    InconsistentFeatureDims {
        stage: String,
        expected: usize,
        found: usize,
    },
    #[error("not a probability vector: {0}")]
    NotAProbabilityVector(String),
    #[error("invalid probability table: {0}")]
    InvalidProbabilityTable(String),
    #[error("split fraction {0} outside the open interval (0, 1)")]
    FractionOutOfRange(f64),
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no training sample has positive importance")]
    AllZeroImportance,
    #[error("samples disagree on the action set: expected {expected} actions, found {found}")]
    InconsistentActionSets { expected: usize, found: usize },
    #[error("downstream policy at stage `{0}` is not trained yet")]
    UntrainedDownstream(String),
    #[error("no policy node for stage `{0}`")]
    MissingPolicyNode(String),
    #[error("malformed policy: {0}")]
    MalformedPolicy(String),
    #[error("policy was trained for a different topology (digest {policy} vs {topology})")]
    TopologyDigestMismatch { policy: String, topology: String },
    #[error("mixing probability {0} outside [0, 1]")]
    POutOfRange(f64),
    #[error("threshold grid is empty")]
    EmptyGrid,
    #[error("no sweep point satisfies the requested budget/tolerance")]
    NoFeasiblePoint,
    #[error("empty lambda grid")]
    EmptyLambdaGrid,
    #[error("io failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// True for errors that mean "the input files/config failed validation"
    /// as opposed to an environment or logic failure. The CLI maps these to
    /// exit code 2.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::IoFailure { .. })
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
