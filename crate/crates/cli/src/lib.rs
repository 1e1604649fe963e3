//! File formats, run configuration, and command implementations behind
//! the `cdre` binary.

pub mod commands;
pub mod config;
pub mod files;

use std::process::ExitCode;

use cdre_core::CdreError;

/// Process-level error with a stable exit-code contract:
/// 2 usage, 3 data, 4 checkpoint mismatch.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Self::Usage(_) => ExitCode::from(2),
            Self::Data(_) => ExitCode::from(3),
            Self::Checkpoint(_) => ExitCode::from(4),
        }
    }
}

impl From<CdreError> for CliError {
    fn from(e: CdreError) -> Self {
        match e {
            CdreError::CheckpointMismatch(_) | CdreError::UnknownGroup(_) => {
                Self::Checkpoint(e.to_string())
            }
            CdreError::MalformedBitstream { .. }
            | CdreError::EmptyInput
            | CdreError::BadManifestEntry(_)
            | CdreError::ShapeMismatch { .. }
            | CdreError::NonFinite(_)
            | CdreError::InputBelowMinimumSize
            | CdreError::DisjointQualityRanges
            | CdreError::NonMonotonicMetric => Self::Data(e.to_string()),
            CdreError::InvalidQuality(_)
            | CdreError::InvalidArgument(_)
            | CdreError::MissingComponent(_) => Self::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
