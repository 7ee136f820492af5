//! Std companion of [`vconv_core`]: WAV ingestion, log-mel features,
//! dataset management, the training runner with checkpoints, one-shot
//! conversion with phase reconstruction, and objective evaluation.

pub mod checkpoint;
pub mod cli;
pub mod convert;
pub mod dataset;
pub mod griffin_lim;
pub mod mcd;
pub mod mel;
pub mod report;
pub mod resample;
pub mod runner;
pub mod synth;
pub mod wav;

use std::path::PathBuf;

/// Everything that can go wrong outside the numerical core. The CLI
/// maps these to exit codes: mismatched or corrupt artifacts exit 3,
/// every other failure exits 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("unsupported or malformed input: {0}")]
    Format(String),
    #[error("input too short: {0}")]
    TooShort(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no speaker has two usable utterances at the requested crop")]
    NoEligibleSpeaker,
    #[error("corrupt artifact {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error(transparent)]
    Core(#[from] vconv_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for input problems, 3 for artifact or
    /// configuration mismatches.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Corrupt { .. } | Error::ConfigMismatch(_) => 3,
            _ => 2,
        }
    }
}
