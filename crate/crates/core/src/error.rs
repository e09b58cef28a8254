use std::path::PathBuf;

/// Errors raised across the crate.
///
/// Variants map onto the contract categories of each module; the CLI turns
/// them into exit codes through [`Error::is_io`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate vector: {0}")]
    Degenerate(String),
    #[error("vocabulary error: token {token} is outside [0, {vocab})")]
    Vocabulary { token: u32, vocab: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("bounds error: {0}")]
    Bounds(String),
    #[error("capacity error: sequence of length {len} exceeds capacity {capacity}")]
    Capacity { len: usize, capacity: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("decode error at position {position}: refined embedding has zero norm")]
    Decode { position: usize },
    #[error("insufficient pool: requested {requested} pairs but the pool holds {available}")]
    InsufficientPool { requested: usize, available: usize },
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("missing artifact {path}: run {producer} first")]
    MissingArtifact { path: PathBuf, producer: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the filesystem rather than of a contract. A
    /// missing upstream artifact counts as a broken dependency contract.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
