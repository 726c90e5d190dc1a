use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Core(oatflow_core::Error),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// 0 success, 2 config, 3 checkpoint, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Checkpoint(_) => 3,
            CliError::Core(_) | CliError::Io { .. } => 1,
        }
    }
}

impl From<oatflow_core::Error> for CliError {
    fn from(e: oatflow_core::Error) -> Self {
        match e {
            oatflow_core::Error::Checkpoint(msg) => CliError::Checkpoint(msg),
            other => CliError::Core(other),
        }
    }
}
