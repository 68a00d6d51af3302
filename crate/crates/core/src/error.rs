use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed dataset file {path}: line {line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("unsupported task: expected exactly two classes, found {found}")]
    UnsupportedTask { found: usize },
    #[error("degenerate dataset {name}: {reason}")]
    DegenerateDataset { name: String, reason: String },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("could not draw a split of {name} containing both classes in the pool after {attempts} attempts")]
    DegenerateSplit { name: String, attempts: usize },
    #[error("labelled set is missing a class; both -1 and +1 are required")]
    MissingClass,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cannot evaluate on an empty test set")]
    EmptyEvaluation,
    #[error("budget {budget} exceeds the {available} queryable pool instances")]
    InvalidBudget { budget: usize, available: usize },
    #[error("action {action} out of range for a pool of {pool}")]
    InvalidAction { action: usize, pool: usize },
    #[error("episode already finished after {steps} steps")]
    EpisodeDone { steps: usize },
    #[error("unlabelled pool is empty")]
    EmptyPool,
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("value {value} lies outside [0, 1]")]
    Domain { value: f64 },
    #[error("return group {group} has {size} episode(s); standardization needs at least 2")]
    InsufficientGroup { group: String, size: usize },
    #[error("checkpoint checksum mismatch or truncated file")]
    Checksum,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("report error: {0}")]
    Report(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
