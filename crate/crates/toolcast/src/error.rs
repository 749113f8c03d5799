use std::path::{Path, PathBuf};

use thiserror::Error;

/// Errors surfaced by the IO layer and the command line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("{}:{line}: {message}", file.display())]
    Parse { file: PathBuf, line: usize, message: String },
    #[error("schema: {0}")]
    Schema(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerics: {0}")]
    Numerics(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(toolcast_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Io { path, source }
    }

    /// Process exit code: 2 config, 3 data, 4 numerics, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use toolcast_core::Error as C;
        match self {
            Error::Config(_) | Error::Core(C::Config(_)) => 2,
            Error::Parse { .. } | Error::Schema(_) | Error::Data(_) => 3,
            Error::Core(C::Input(_) | C::Shape(_) | C::Range { .. } | C::Eval(_) | C::NoDirection) => 3,
            Error::Numerics(_) | Error::Core(C::Numerics(_)) => 4,
            Error::Io { .. } => 1,
        }
    }
}

impl From<toolcast_core::Error> for Error {
    fn from(e: toolcast_core::Error) -> Self {
        Error::Core(e)
    }
}
