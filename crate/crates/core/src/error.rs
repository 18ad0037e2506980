use thiserror::Error;

/// Errors produced by the library.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("corrupted spectrum: imaginary residue {residue:.3e} exceeds {limit:.3e}")]
    CorruptSpectrum { residue: f64, limit: f64 },

    #[error("backward() already ran on this tape")]
    BackwardTwice,

    #[error("function under test is not deterministic: {0}")]
    NonDeterministic(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("verification failed: {0}")]
    Verify(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
