use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed data line {0}")]
    MalformedLine(usize),
    #[error("spectrum has fewer than 2 data points")]
    EmptySpectrum,
    #[error("wavenumbers are not strictly increasing (line {0})")]
    NonMonotonicGrid(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("non-finite input value")]
    NonFiniteInput,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("baseline linear system is numerically singular at row {0}")]
    SolveFailure(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch-norm needs at least 2 values per channel in train mode, got {0}")]
    DegenerateBatch(usize),
    #[error("backward called without a cached train-mode forward pass")]
    NoForwardCache,
    #[error("no positive pairs: every class has a single sample")]
    NoPositivePairs,
    #[error("too few classes: need at least {needed}, got {got}")]
    TooFewClasses { needed: usize, got: usize },
    #[error("reference database was built with model {db:08x}, got model {model:08x}")]
    ModelMismatch { db: u32, model: u32 },
    #[error("unknown class {0}")]
    UnknownClass(u32),
    #[error("reference database is empty")]
    EmptyDb,
    #[error("cosine similarity undefined for an all-zero vector")]
    ZeroVector,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
