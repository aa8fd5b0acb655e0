use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid rotation: quaternion has zero norm")]
    InvalidRotation,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("non-finite {attribute} on gaussian {index}")]
    PoisonedInput { index: usize, attribute: &'static str },

    #[error("non-finite gradient in {path}")]
    NonFiniteGradient { path: String },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("frame has no valid pixels: {0}")]
    EmptyFrame(String),

    #[error("{}: {message}", path.display())]
    Load { path: PathBuf, message: String },

    #[error("{}: malformed PFM at byte {offset}: {message}", path.display())]
    Pfm {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Coarse classification used by the CLI to choose an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::PoisonedInput { .. } | Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } => {
                ErrorKind::Numeric
            }
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            message: message.into(),
        }
    }
}
