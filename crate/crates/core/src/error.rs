use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected:?}, got {actual:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("distillation diverged at step {step}: loss = {loss}")]
    DistillDiverged { step: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("no sample with a label other than {target_class} to use as a source")]
    EmptySourcePool { target_class: usize },

    #[error("memory budget {budget} is smaller than the {classes} seen classes")]
    BudgetTooSmall { budget: usize, classes: usize },

    #[error("exemplar {0} is not in memory")]
    MissingExemplar(u64),

    #[error("class {0} has not been seen")]
    UnseenClass(usize),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("accuracy matrix: {0}")]
    Matrix(String),

    #[error("degenerate feature: zero variance over the dataset")]
    DegenerateFeature,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("malformed {kind}: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error("task {task}: {source}")]
    Task {
        task: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(kind: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            kind,
            msg: msg.into(),
        }
    }

    pub(crate) fn at_task(self, task: usize) -> Self {
        match self {
            e @ Error::Task { .. } => e,
            e => Error::Task {
                task,
                source: Box::new(e),
            },
        }
    }
}
