use std::path::PathBuf;

use thiserror::Error;

use crate::ingest::IngestError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown analysis: {0}")]
    UnknownAnalysis(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("data error: {0}")]
    Data(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for configuration problems, 3 for anything wrong with the data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::UnknownAnalysis(_) => 2,
            Self::Ingest(_) | Self::Data(_) | Self::Io { .. } => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> Self {
        let path = path.into();
        move |e| Self::Data(format!("{}: {e}", path.display()))
    }
}
