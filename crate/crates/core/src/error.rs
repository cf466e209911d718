use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed request sequence: {0}")]
    Sequence(String),

    #[error("IDX format error: {0}")]
    Idx(String),

    #[error("unknown task {0}")]
    UnknownTask(u32),

    #[error("task {0} is already learned and active")]
    TaskActive(u32),

    #[error("task {0} is not active and cannot be unlearned")]
    TaskNotActive(u32),

    #[error("no hypernetwork snapshot has been taken")]
    MissingSnapshot,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("trace error: {0}")]
    Trace(String),

    #[error("operation {index} ({op}) failed: {source}")]
    Operation {
        index: usize,
        op: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short category name, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) | Error::LabelOutOfRange { .. } | Error::NonFinite(_) => "numeric",
            Error::Config(_) => "config",
            Error::Sequence(_) => "sequence",
            Error::Idx(_) | Error::EmptyDataset => "data",
            Error::UnknownTask(_)
            | Error::TaskActive(_)
            | Error::TaskNotActive(_)
            | Error::MissingSnapshot => "engine",
            Error::Trace(_) | Error::Csv(_) => "trace",
            Error::Operation { source, .. } => source.category(),
            Error::Io(_) | Error::Json(_) => "io",
        }
    }
}
