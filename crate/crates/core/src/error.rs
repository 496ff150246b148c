use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's contract (shapes, ranges, bounds).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("parse error in {path} (frame {frame}): {msg}")]
    Parse {
        path: PathBuf,
        frame: usize,
        msg: String,
    },

    #[error("waveform too short: {len} samples, need at least {need}")]
    TooShort { len: usize, need: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Malformed(_) => "malformed",
            Error::Parse { .. } => "parse",
            Error::TooShort { .. } => "too_short",
            Error::Empty(_) => "empty",
            Error::Diverged { .. } => "diverged",
            Error::Verification(_) => "verification",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Image(_) => "image",
            Error::Wav(_) => "wav",
        }
    }

    /// Process exit code: 2 config, 3 data, 4 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Verification(_) => 4,
            _ => 3,
        }
    }
}
