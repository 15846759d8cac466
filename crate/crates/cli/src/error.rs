use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] proptok::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 2 = bad arguments, 3 = validation or format error, 4 = numeric failure.
    pub fn exit_code(&self) -> u8 {
        use proptok::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                E::Argument(_) => 2,
                E::NonFiniteLoss { .. }
                | E::DegenerateVector { .. }
                | E::DegeneratePrototype { .. }
                | E::NonScalarLoss(_) => 4,
                _ => 3,
            },
        }
    }
}
