use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the obstruction laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("loss must be a scalar node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("op `{0}` has no second-order rule; exact-unrolled differentiation is unsupported through it")]
    UnsupportedOp(String),

    #[error("support set has no example of episode class {class}")]
    EmptyClass { class: usize },

    #[error("label {label} is not in the episode class space {classes:?}")]
    LabelNotInEpisode { label: usize, classes: Vec<usize> },

    #[error("linear solver failed: {0}")]
    Solver(String),

    #[error("optimization diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("task {task}: {source}")]
    Task {
        task: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("insufficient samples for class {class}: need {need}, have {have}")]
    InsufficientSamples {
        class: usize,
        need: usize,
        have: usize,
    },

    #[error("episode constraint unsatisfiable: {0}")]
    Constraint(String),

    #[error("drop ratio undefined: delta on other classes is exactly zero at step {step}")]
    UndefinedRatio { step: usize },

    #[error("invalid config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("degenerate dataset: {0}")]
    Degenerate(String),

    #[error("insufficient evaluation episodes: {got} < {min}")]
    InsufficientEpisodes { got: usize, min: usize },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the index of the task that produced it.
    pub fn in_task(self, task: usize) -> Self {
        Error::Task {
            task,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
