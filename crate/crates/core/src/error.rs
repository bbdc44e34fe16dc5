use thiserror::Error;

use crate::problem::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The configuration text could not be parsed.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// A coefficient, path or table has the wrong shape.
    #[error("dimension mismatch in `{name}`: expected {expected}, found {found}")]
    DimensionMismatch {
        name: String,
        expected: String,
        found: String,
    },

    /// Input rejected before any computation.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("problem fails validation: {}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("CFL condition violated: dt*sigma_bar_sq/dx^2 = {ratio:.6} > 0.5")]
    Cfl { ratio: f64 },

    /// `R + D^T P D gamma` lost positive definiteness.
    #[error("singular feedback denominator at t={time:.6}: min eigenvalue {min_eig:.3e}")]
    Singularity { time: f64, min_eig: f64 },

    #[error("Riccati solution lost positivity at t={time:.6}: min eigenvalue {min_eig:.3e}")]
    PositivityLoss { time: f64, min_eig: f64 },

    #[error("non-finite value encountered at t={time:.6}")]
    NonFinite { time: f64 },

    #[error("time grid misaligned: {0}")]
    Alignment(String),

    /// The two algebraic forms of the adjoint `q` disagree.
    #[error("adjoint forms disagree at t={time:.6} by {discrepancy:.3e} (tolerance {tol:.1e})")]
    Inconsistency {
        time: f64,
        discrepancy: f64,
        tol: f64,
    },

    #[error("budget exceeded: {what} needs {size} evaluations, limit is {limit}")]
    BudgetExceeded { what: String, size: u128, limit: u128 },

    #[error("worst-case scenario has unexpected shape: {0}")]
    Shape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::DimensionMismatch { .. }
            | Error::InvalidInput(_)
            | Error::Validation(_)
            | Error::Cfl { .. }
            | Error::Alignment(_)
            | Error::BudgetExceeded { .. }
            | Error::Io(_) => 1,
            Error::Singularity { .. }
            | Error::PositivityLoss { .. }
            | Error::NonFinite { .. }
            | Error::Inconsistency { .. }
            | Error::Shape(_) => 2,
        }
    }
}
