//! Error type shared by every workbench module.
//!
//! Variants are grouped by how a caller should react: *validation-class*
//! errors mean the inputs (specs, datasets, configs) were never acceptable,
//! while *numerical-class* errors mean a well-posed computation failed at
//! runtime (rank collapse, divergence, overflow). The CLI maps the former to
//! exit code 2 and the latter to exit code 3.

use thiserror::Error;

use crate::solvers::TrainHistory;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the workbench.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix/vector dimensions do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An argument is malformed or out of range (non-finite entries, empty
    /// matrices, zero resolution, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The request can never be satisfied for structural reasons, e.g. asking
    /// for a rank-`N` feature matrix with fewer than `N` skip units.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// A structural assumption required by the theory does not hold for this
    /// network (wrong activation on a skip unit, missing skip-free backward
    /// path, ...).
    #[error("assumption violated: {0}")]
    Assumption(String),

    /// The dataset itself blocks the computation: duplicate input patches,
    /// tied orderings that resampling could not break, and the like.
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// A matrix that had to be full rank numerically was not.
    #[error("rank deficient: {0}")]
    RankDeficient(String),

    /// Floating-point breakdown: overflow to non-finite values, a bound that
    /// could not be met, an iteration cap exhausted.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A combination of options the workbench deliberately does not handle.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A file or string could not be decoded (JSON, CSV, IDX, checkpoint).
    #[error("parse error: {0}")]
    Parse(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// SGD produced a non-finite loss or parameter. Carries the history up to
    /// the failing epoch so callers can inspect the blow-up.
    #[error("training diverged at epoch {at_epoch}")]
    Diverged {
        at_epoch: usize,
        history: Box<TrainHistory>,
    },
}

impl Error {
    /// Process exit code the CLI should use for this error: 2 for
    /// validation/assumption failures, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ShapeMismatch(_)
            | Error::InvalidInput(_)
            | Error::Infeasible(_)
            | Error::Assumption(_)
            | Error::DegenerateData(_)
            | Error::Unsupported(_)
            | Error::Parse(_)
            | Error::Io(_) => 2,
            Error::RankDeficient(_) | Error::Numerical(_) | Error::Diverged { .. } => 3,
        }
    }
}
