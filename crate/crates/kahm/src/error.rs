//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// All samples are identical within tolerance; no usable subspace exists.
    #[error("degenerate data: projected range below 1e-3 along every component")]
    DegenerateData,

    /// A dense linear-algebra routine (eigensolver, factorization) failed.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// The regularization fixed point did not converge within the iteration cap.
    #[error("fixed-point iteration hit the cap of {cap} iterations (last relative step {step:.3e})")]
    NoConvergence { cap: usize, step: f64 },

    /// The sample block has Frobenius norm zero.
    #[error("zero data: sample block has Frobenius norm 0")]
    ZeroData,

    /// A class has no training samples anywhere.
    #[error("class {0} has no training samples")]
    EmptyClass(usize),

    /// No class in the model has any cells.
    #[error("no class has any cells")]
    AllClassesEmpty,

    /// A client owns no cells at all.
    #[error("client {0} owns no cells")]
    ClientHasNoCells(usize),

    /// The requested operation is not defined for this model shape.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// An argument is outside its mathematical domain.
    #[error("domain error: {0}")]
    DomainError(String),

    /// A partition specification cannot be satisfied.
    #[error("infeasible partition spec: {0}")]
    InfeasibleSpec(String),

    /// A value is outside its permitted range.
    #[error("value out of range: {0}")]
    RangeError(String),

    /// Malformed input file; `row` is 1-based and counts data rows.
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    /// A model archive failed structural or checksum validation.
    #[error("archive error: {0}")]
    Archive(String),

    /// Two inputs disagree on dimensions.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
