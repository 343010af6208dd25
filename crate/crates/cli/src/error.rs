use thiserror::Error;

use crate::features::LoadError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("[{code}] {0}", code = .0.code())]
    Load(#[from] LoadError),
    #[error("{0}")]
    Core(#[from] discrepancy::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for numerical failures inside the library, 1 for everything the
    /// caller can fix.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}
