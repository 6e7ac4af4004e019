use std::path::PathBuf;

/// Errors from the std-side pipeline: IO, parsing, models and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] dermoscan_core::Error),
    #[error("metadata is missing required column `{0}`")]
    MissingColumn(&'static str),
    #[error("row {row}: unknown diagnosis label `{label}`")]
    UnknownLabel { row: usize, label: String },
    #[error("row {row}: {message}")]
    BadRow { row: usize, message: String },
    #[error("duplicate image id `{0}`")]
    DuplicateImage(String),
    #[error("cannot write to {path}: {source}")]
    OutputNotWritable { path: PathBuf, source: std::io::Error },
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot decode image: {0}")]
    UndecodableImage(String),
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("pretrained weights unavailable: {0}")]
    WeightsUnavailable(String),
    #[error("checkpoint {path} is corrupt or unreadable: {reason}")]
    CheckpointCorrupt { path: PathBuf, reason: String },
    #[error("corpus is missing {} image(s), first: {}", .0.len(), .0.first().map(String::as_str).unwrap_or(""))]
    CorpusIncomplete(Vec<String>),
    #[error("training loss became non-finite in epoch {epoch}")]
    DivergedLoss { epoch: usize, logs: Vec<crate::train::EpochLog> },
    #[error("cannot listen on {addr}: {source}")]
    PortUnavailable { addr: String, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Torch(#[from] tch::TchError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn read_error(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Read { path, source }
}

pub(crate) fn write_error(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::OutputNotWritable { path, source }
}
