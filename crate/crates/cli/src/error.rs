use std::path::PathBuf;

use ddlab_core::LabError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config at `{field}`: {message}")]
    ConfigInvalid { field: String, message: String },
    #[error("missing artifact {}: run `{stage}` first", path.display())]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("no CSV artifacts under {}", .0.display())]
    EmptyRunDir(PathBuf),
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl ToString) -> Self {
        Self::ConfigInvalid {
            field: field.into(),
            message: message.to_string(),
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for missing
    /// inputs, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::ConfigInvalid { .. } => 2,
            Self::MissingArtifact { .. } | Self::EmptyRunDir(_) => 3,
            Self::Lab(_) | Self::Io(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
