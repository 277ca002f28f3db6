use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("missing artifact: {0}")]
    Missing(String),

    #[error(transparent)]
    Other(discrec::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Missing(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn missing(path: &Path, hint: &str) -> Self {
        CliError::Missing(format!("{} not found; {hint}", path.display()))
    }
}

impl From<discrec::Error> for CliError {
    fn from(e: discrec::Error) -> Self {
        match e {
            discrec::Error::Config(m) => CliError::Config(m),
            discrec::Error::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Other(other),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.into())
    }
}
