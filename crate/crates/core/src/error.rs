use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("index {index} out of range for {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("backend `{backend}` unavailable: {reason}")]
    BackendUnavailable { backend: String, reason: String },

    #[error("backend failure at layer {layer}, timestep {timestep}: {source}")]
    Backend {
        layer: String,
        timestep: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True when the error originated inside a backend (as opposed to bad
    /// caller input or configuration).
    pub fn is_backend(&self) -> bool {
        matches!(self, Error::Backend { .. } | Error::BackendUnavailable { .. })
    }
}
