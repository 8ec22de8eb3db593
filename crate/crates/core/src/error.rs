use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read corpus file {path}: {source}")]
    Ingestion {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corpus contains no sentences")]
    EmptyCorpus,

    #[error("index file is malformed: {0}")]
    IndexFormat(String),

    #[error("malformed template: {0}")]
    MalformedTemplate(String),

    #[error("malformed prompt: expected exactly one `{marker}`, found {found}")]
    MalformedPrompt { marker: String, found: usize },

    #[error("input text is empty")]
    EmptyInput,

    #[error("model has no vocabulary; train it before predicting")]
    EmptyModel,

    #[error("model state is malformed: {0}")]
    ModelFormat(String),

    #[error("invalid verbalizer: {0}")]
    InvalidVerbalizer(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("backend transport error: {0}")]
    Transport(String),

    #[error("backend protocol error: {0}")]
    Protocol(String),

    #[error("{path}:{line}: {message}")]
    DatasetParse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: unknown label `{value}`")]
    UnknownLabel { path: PathBuf, line: usize, value: String },

    #[error("dataset {0} is empty")]
    EmptyDataset(PathBuf),

    #[error("predictions and gold labels are not aligned: {0}")]
    Alignment(String),

    #[error("cannot aggregate an empty list of pattern accuracies")]
    NoPatterns,

    #[error("lexicon line {line}: {message}")]
    Lexicon { line: usize, message: String },

    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
