use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact {} (produced by `{producer}`)", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error("artifact {} does not match its schema: {message}", path.display())]
    SchemaMismatch { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] switchid_core::Error),
    #[error("I/O error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("stage {stage} failed: {source}")]
    Stage { stage: &'static str, source: Box<CliError> },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> CliError {
        CliError::Io { path: path.into(), source }
    }

    /// Process exit status: 2 configuration, 3 missing or malformed artifact,
    /// 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use switchid_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } | CliError::SchemaMismatch { .. } => 3,
            CliError::Core(E::InvalidParams(_) | E::Parse(_)) => 2,
            CliError::Core(_) => 4,
            CliError::Io { .. } => 1,
            CliError::Stage { source, .. } => source.exit_code(),
        }
    }
}
