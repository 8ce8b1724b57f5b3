use thiserror::Error;

use crate::equilibrium::IterationTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },
    #[error("index {index} out of range for extent {extent}")]
    Index { index: usize, extent: usize },
    #[error("{0}")]
    Range(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("fixed-point iteration diverged at step {}", trace.steps())]
    Divergence { trace: IterationTrace },
    #[error("kv cache: {0}")]
    Cache(String),
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("budget infeasible: {0}")]
    Budget(String),
    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error("training produced a non-finite loss at step {step}")]
    Training { step: u64, report: Box<crate::trainer::LossReport> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Whether the failure came from numerics rather than configuration or IO.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::Training { .. } | Error::DegenerateRow { .. }
        )
    }
}
