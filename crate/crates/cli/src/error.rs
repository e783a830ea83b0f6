use thiserror::Error;

use volseg_core::Error as CoreError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{context}: {source}")]
    Stage {
        context: String,
        #[source]
        source: CoreError,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Stage { source, .. } => match source {
                CoreError::Config(_) | CoreError::Parameter(_) | CoreError::Spec(_) => EXIT_CONFIG,
                CoreError::Divergence { .. } => EXIT_DIVERGENCE,
                _ => EXIT_DATA,
            },
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

/// Attaches a stage / volume label to core errors.
pub trait StageContext<T> {
    fn stage(self, context: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T> StageContext<T> for volseg_core::Result<T> {
    fn stage(self, context: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|source| CliError::Stage {
            context: context(),
            source,
        })
    }
}
