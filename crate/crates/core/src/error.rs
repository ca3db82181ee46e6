use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{layer}: shape mismatch, expected {expected:?}, got {got:?}")]
    Shape {
        layer: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("{}label {label} of sample {sample} is outside [0, {classes})", client_prefix(*.client))]
    LabelOutOfRange {
        client: Option<usize>,
        sample: usize,
        label: usize,
        classes: usize,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("architecture design: {0}")]
    Design(String),

    #[error("unknown client {0}")]
    UnknownClient(usize),

    #[error("tensor `{tensor}` of client {client}: expected dims {expected:?}, got {got:?}")]
    DimMismatch {
        tensor: String,
        client: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("data: {0}")]
    Data(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("client {client}, step {step}: {source}")]
    Client {
        client: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn client_prefix(client: Option<usize>) -> String {
    match client {
        Some(c) => format!("client {c}: "),
        None => String::new(),
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file while reading {0}")]
    Truncated(&'static str),
    #[error("tensor `{name}` has an invalid shape {dims:?}")]
    BadDims { name: String, dims: Vec<u32> },
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("duplicate tensor `{0}`")]
    Duplicate(String),
    #[error("{0} trailing bytes after last tensor")]
    Trailing(usize),
    #[error("too many tensors to encode: {0}")]
    TooLarge(String),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            layer: layer.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches the client id and local step to an error raised inside local training.
    pub fn in_client(self, client: usize, step: usize) -> Self {
        match self {
            Error::LabelOutOfRange {
                sample,
                label,
                classes,
                ..
            } => Error::LabelOutOfRange {
                client: Some(client),
                sample,
                label,
                classes,
            },
            e @ Error::Client { .. } => e,
            other => Error::Client {
                client,
                step,
                source: Box::new(other),
            },
        }
    }
}
