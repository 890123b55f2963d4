use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    ConfigParse(String),
    #[error("{}", .0.display())]
    FileNotFound(PathBuf),
    #[error("{0}")]
    SpecMismatch(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::ConfigParse(_) => "ConfigParse",
            Self::FileNotFound(_) => "FileNotFound",
            Self::SpecMismatch(_) => "SpecMismatch",
            Self::InvalidArgument(_) => "InvalidArgument",
            Self::Failed(_) => "Failed",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Failed(_) => 1,
            _ => 2,
        }
    }

    /// Single line `error kind=<Kind> message=<json-style string>`.
    pub fn line(&self) -> String {
        format!("error kind={} message={:?}", self.kind(), self.to_string())
    }

    pub fn failed(e: impl std::fmt::Display) -> Self {
        Self::Failed(e.to_string())
    }
}

impl From<msfpca::model::ModelError> for CliError {
    fn from(e: msfpca::model::ModelError) -> Self {
        match e {
            msfpca::model::ModelError::SpecMismatch { .. } => Self::SpecMismatch(e.to_string()),
            other => Self::failed(other),
        }
    }
}

impl From<msfpca::experiments::ExperimentError> for CliError {
    fn from(e: msfpca::experiments::ExperimentError) -> Self {
        match e {
            msfpca::experiments::ExperimentError::Model(m) => m.into(),
            other => Self::failed(other),
        }
    }
}
