use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller supplied a value outside the operation's domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A file did not parse. `offset` is the byte position where decoding failed.
    #[error("format error in {}: {msg} (at byte offset {offset})", path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<memory>".into()))]
    Format {
        path: Option<PathBuf>,
        offset: u64,
        msg: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Non-finite values showed up during a numerical procedure.
    #[error("numerical failure in {what} at step {step}")]
    Numerical { what: String, step: usize },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            path: None,
            offset,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a path to a format error produced while decoding an in-memory buffer.
    pub fn with_path(self, p: impl Into<PathBuf>) -> Self {
        match self {
            Error::Format { offset, msg, .. } => Error::Format {
                path: Some(p.into()),
                offset,
                msg,
            },
            other => other,
        }
    }
}
