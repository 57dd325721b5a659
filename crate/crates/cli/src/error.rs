use std::path::PathBuf;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` needs {what}; run `gridpoint {upstream}` first")]
    Missing {
        stage: &'static str,
        upstream: &'static str,
        what: String,
    },

    #[error("{0} is locked by another run (remove it if that run is gone)")]
    Locked(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Runtime(String),

    #[error(transparent)]
    Core(#[from] gridpoint_core::Error),

    #[error(transparent)]
    Net(#[from] gridpoint_net::NetError),
}

impl CliError {
    /// 2 config error, 3 missing upstream artifact, 4 runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing { .. } => 3,
            _ => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
