use thiserror::Error;

/// Errors raised by the lattice, averaging, and oracle routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("scale mismatch: {0}")]
    ScaleMismatch(String),

    #[error("level mismatch: expected {expected}, found {found}")]
    LevelMismatch { expected: String, found: String },

    #[error("regions are not nested: {0}")]
    NotNested(String),

    #[error("enumeration overflow: {what} (limit {limit})")]
    EnumerationOverflow { what: String, limit: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("broken path at step {0}")]
    BrokenPath(usize),

    #[error("singular operator: {what}; smallest singular values {spectrum:?}")]
    Singular { what: String, spectrum: Vec<f64> },

    #[error("infeasible constraints: rank {rank} of {rows} rows")]
    Infeasible { rank: usize, rows: usize },

    #[error("no convergence after {iterations} iterations; residuals {residuals:?}")]
    NoConvergence { iterations: usize, residuals: Vec<f64> },

    #[error("series diverges: term norms {0:?}")]
    Divergence(Vec<f64>),

    #[error("degree cap {cap} exceeded (degree {degree})")]
    DegreeCap { cap: usize, degree: usize },

    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;
