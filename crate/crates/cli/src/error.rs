use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("missing input: {}", .0.display())]
    Missing(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] cfgmoe::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 1 for bad or missing input, 2 for failures while running a stage.
    pub fn exit_code(&self) -> i32 {
        use cfgmoe::Error as E;
        match self {
            CliError::Missing(_) | CliError::Config(_) => 1,
            CliError::Core(e) => match e {
                E::Diverged { .. } | E::NonFiniteGradient(_) | E::NonScalarRoot(_) | E::Io(_) => 2,
                _ => 1,
            },
            CliError::Io(_) => 2,
            CliError::Csv(e) if e.is_io_error() => 2,
            CliError::Csv(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
