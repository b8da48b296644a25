use alloc::string::String;
use alloc::vec::Vec;

use crate::engine::LossBreakdown;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("matrix is not positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("{requested} classes requested but only {available} distinct patterns exist")]
    Capacity { requested: usize, available: usize },
    #[error("need at least 2 samples to estimate statistics of class {class_id}, got {count}")]
    InsufficientSamples { class_id: usize, count: usize },
    #[error("statistics for class {0} are already stored")]
    WriteOnce(usize),
    #[error("class {0} not found")]
    Lookup(usize),
    #[error("non-finite loss at task {task}, epoch {epoch}, step {step}: {breakdown:?}")]
    NonFiniteLoss {
        task: usize,
        epoch: usize,
        step: usize,
        breakdown: LossBreakdown,
    },
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
