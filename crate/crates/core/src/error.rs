use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("goal id {goal} out of range for {n_goals} goals")]
    GoalOutOfRange { goal: usize, n_goals: usize },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("tape does not match parameters: {0}")]
    TapeMismatch(String),

    #[error("{path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("shift ({dx}, {dy}) too large for {width}x{height} image")]
    ShiftTooLarge {
        dx: i32,
        dy: i32,
        width: usize,
        height: usize,
    },

    #[error("no live cells")]
    NoLiveCells,

    #[error("bad checkpoint magic")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checkpoint has {checkpoint} cell channels but the run requests {requested}")]
    ChannelMismatch { checkpoint: usize, requested: usize },

    #[error("checkpoint metadata: {0}")]
    Metadata(String),

    #[error("unknown preset '{name}' (valid presets: {valid})")]
    UnknownPreset { name: String, valid: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
