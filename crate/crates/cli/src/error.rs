use serde::Serialize;

/// Failure of a command, carrying its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config or input data.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] ohgc_core::Error),
    #[error("{0}")]
    Internal(String),
}

#[derive(Serialize)]
struct Report<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use ohgc_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(E::Contract(_)) => 1,
            CliError::Core(_) => 2,
            CliError::Internal(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        use ohgc_core::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(E::Io { .. }) => "io",
            CliError::Core(E::Parse { .. }) => "parse",
            CliError::Core(E::Schema { .. }) => "schema",
            CliError::Core(E::Config(_)) => "config",
            CliError::Core(E::Shape { .. }) => "shape",
            CliError::Core(E::Contract(_)) => "internal",
            CliError::Internal(_) => "internal",
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&Report {
            error: self.kind(),
            message: self.to_string(),
            exit_code: self.exit_code(),
        })
        .expect("error report serializes")
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub(crate) fn write_file(path: &std::path::Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| {
        CliError::Core(ohgc_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}
