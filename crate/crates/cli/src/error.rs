use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Runtime {
        context: String,
        #[source]
        source: pact_core::Error,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("output error: {0}")]
    Output(String),
    #[error("comparison incomplete, missing: {}", .missing.join(", "))]
    Partial { missing: Vec<String> },
}

impl CliError {
    /// Process exit status: 1 config, 2 runtime, 3 partial comparison.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime { .. } | CliError::Io { .. } | CliError::Output(_) => 2,
            CliError::Partial { .. } => 3,
        }
    }
}

pub(crate) trait Context<T> {
    fn context(self, what: impl Into<String>) -> Result<T, CliError>;
}

impl<T> Context<T> for pact_core::Result<T> {
    fn context(self, what: impl Into<String>) -> Result<T, CliError> {
        self.map_err(|source| CliError::Runtime {
            context: what.into(),
            source,
        })
    }
}
