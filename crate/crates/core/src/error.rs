use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("mass matrix is not positive definite (check link inertias)")]
    MassMatrixNotSpd,

    #[error("singular configuration: smallest Jacobian singular value {sigma_min:.3e} < {threshold:.0e}")]
    SingularConfiguration { sigma_min: f64, threshold: f64 },

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("negative force {0} N")]
    NegativeForce(f64),

    #[error("no established contact (F = {force} N)")]
    NoContact { force: f64 },

    #[error("normal force {force} N below contact floor {floor} N")]
    LowForce { force: f64, floor: f64 },

    #[error("quadrature did not converge: estimated error {estimate:.3e} > tolerance {tolerance:.1e}")]
    Quadrature { estimate: f64, tolerance: f64 },

    #[error("linearization requested at a contact-mode boundary (F_z = {force} N)")]
    ModeBoundary { force: f64 },

    #[error("DDP backward pass failed: regularization exceeded {max_reg:.0e}")]
    BackwardPass { max_reg: f64 },

    #[error("fit did not converge after {iterations} iterations")]
    FitNotConverged { iterations: usize },

    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("parse error in {source_name}: {message}")]
    Parse { source_name: String, message: String },

    #[error("csv error in {source_name} at line {line}: {message}")]
    Csv {
        source_name: String,
        line: u64,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
