use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("label {label} out of range [0, {classes}) at pixel {index}")]
    LabelOutOfRange { label: u8, classes: usize, index: usize },

    #[error("variable does not belong to this tape")]
    NotOnTape,

    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(String),

    #[error("batch norm `{0}` evaluated before its running statistics were populated")]
    UnpopulatedStats(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: u64, reason: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("phantom geometry infeasible after {0} attempts")]
    InfeasibleGeometry(usize),

    #[error("{0}")]
    Invalid(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
