use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Verification(_) => EXIT_VERIFY,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<flowmatch::ode::OdeError> for CliError {
    fn from(e: flowmatch::ode::OdeError) -> Self {
        use flowmatch::ode::OdeError::*;
        match e {
            Config(m) => CliError::Config(m),
            Dimension { .. } | Pixel(_) => CliError::Config(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<flowmatch::autodiff::AutodiffError> for CliError {
    fn from(e: flowmatch::autodiff::AutodiffError) -> Self {
        use flowmatch::autodiff::AutodiffError::*;
        match e {
            Io(_) => CliError::Io(e.to_string()),
            Json(_) | Checkpoint(_) => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<flowmatch::model::ModelError> for CliError {
    fn from(e: flowmatch::model::ModelError) -> Self {
        match e {
            flowmatch::model::ModelError::Autodiff(a) => a.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<flowmatch::data::DataError> for CliError {
    fn from(e: flowmatch::data::DataError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<flowmatch::paths::PathError> for CliError {
    fn from(e: flowmatch::paths::PathError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<flowmatch::oracle::OracleError> for CliError {
    fn from(e: flowmatch::oracle::OracleError) -> Self {
        CliError::Config(e.to_string())
    }
}
