use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Audio { path: PathBuf, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration problem; `keys` names every offending config key.
    #[error("config error [{}]: {message}", keys.join(", "))]
    Config { keys: Vec<String>, message: String },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("utterance {utt_id}: {source}")]
    Utterance {
        utt_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(keys: &[&str], message: impl Into<String>) -> Self {
        Error::Config { keys: keys.iter().map(|k| k.to_string()).collect(), message: message.into() }
    }

    pub(crate) fn for_utterance(self, utt_id: &str) -> Self {
        Error::Utterance { utt_id: utt_id.to_string(), source: Box::new(self) }
    }

    /// True for errors caused by the caller's configuration or arguments
    /// rather than by the data being processed.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
