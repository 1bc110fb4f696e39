use thiserror::Error;

use crate::model::ModelParams;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate representation: row {row} has norm {norm:e} below {eps:e}")]
    DegenerateRepresentation { row: usize, norm: f64, eps: f64 },

    #[error("empty batch in {0}")]
    EmptyBatch(&'static str),

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error in `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("insufficient batch: {op} needs at least {needed} rows, got {got}")]
    InsufficientBatch {
        op: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("near-orthogonal degeneracy: |<p, target>| = {value:e} below {eps:e} in row {row}")]
    NearOrthogonal { row: usize, value: f64, eps: f64 },

    #[error("batch error: {0}")]
    Batch(String),

    #[error("schedule error at step {step}: {detail}")]
    Schedule { step: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("singular second-moment matrix: {0}")]
    SingularMoment(String),

    #[error("eval error: {0}")]
    Eval(String),

    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss {
        step: usize,
        value: f64,
        state: Box<ModelParams>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }
}
