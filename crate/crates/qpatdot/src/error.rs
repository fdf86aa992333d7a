//! Crate-wide error type and exit-code mapping.

/// Errors produced by the toolkit.
///
/// Variants map to distinct process exit codes in the CLI so that scripted
/// pipelines can distinguish configuration mistakes from numerical failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied argument violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Measured or modeled data violates an assumption (zero denominators,
    /// magnitudes below the reweighting floor, ...).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Data is structurally fine but degenerate for the requested operation
    /// (e.g. a vanishing boundary-recovery denominator with no usable
    /// fallback source pair).
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// The linear solver failed (singular or severely ill-conditioned system).
    #[error("solver failure: {0}")]
    SolverFailure(String),

    /// The optimizer could not make progress and no partial result is usable.
    #[error("optimizer failure: {0}")]
    OptimizerFailure(String),

    /// Configuration file problems, with file/key diagnostics.
    #[error("config error: {0}")]
    Config(String),

    /// A dataset and a config disagree on keys that must match.
    #[error("incompatible dataset: {0}")]
    Incompatible(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI. 0 is reserved for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Incompatible(_) => 3,
            Error::SolverFailure(_) | Error::InvalidData(_) | Error::DegenerateData(_) => 4,
            Error::OptimizerFailure(_) => 5,
            Error::Io(_) => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
