use std::path::PathBuf;

use thiserror::Error;

/// Everything that can stop a run, each mapped to its own process exit code.
#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot read input image {}: {reason}", path.display())]
    UnreadableInput { path: PathBuf, reason: String },
    #[error("missing asset {id}: {detail}")]
    MissingAsset { id: String, detail: String },
    #[error("asset {id} is unusable: {detail}")]
    InvalidAsset { id: String, detail: String },
    #[error("invalid eye regions: {0}")]
    InvalidEyes(String),
    #[error("computation failed: {0}")]
    Compute(#[from] rephoto_core::Error),
    #[error("cannot write {}: {source}", path.display())]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("replay mismatch: {0}")]
    Replay(String),
}

impl RunError {
    pub const CONFIG: u8 = 2;
    pub const UNREADABLE_INPUT: u8 = 3;
    pub const MISSING_ASSET: u8 = 4;
    pub const INVALID_ASSET: u8 = 5;
    pub const INVALID_EYES: u8 = 6;
    pub const COMPUTE: u8 = 7;
    pub const OUTPUT: u8 = 8;
    pub const REPLAY: u8 = 9;

    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) => Self::CONFIG,
            RunError::UnreadableInput { .. } => Self::UNREADABLE_INPUT,
            RunError::MissingAsset { .. } => Self::MISSING_ASSET,
            RunError::InvalidAsset { .. } => Self::INVALID_ASSET,
            RunError::InvalidEyes(_) => Self::INVALID_EYES,
            RunError::Compute(_) => Self::COMPUTE,
            RunError::Output { .. } => Self::OUTPUT,
            RunError::Replay(_) => Self::REPLAY,
        }
    }

    pub(crate) fn output(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> RunError {
        let path = path.into();
        move |source| RunError::Output { path, source }
    }
}
