use alloc::string::String;

/// Errors raised by the computational core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("displacement has zero norm, no direction defined")]
    NoDirection,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{what} = {value} out of range {range}")]
    Range {
        what: &'static str,
        value: i64,
        range: String,
    },
    #[error("numerical failure: {0}")]
    Numerics(String),
    #[error("evaluation error: {0}")]
    Eval(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
