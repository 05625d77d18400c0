use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("degree {degree} exceeds the configured cap {cap}")]
    DegreeCap { degree: usize, cap: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value encountered at t = {t}; try a smaller step")]
    NonFinite { t: f64 },

    #[error("operator is not of affine type: {0}")]
    NotAffine(String),

    #[error("finite-time explosion (numerical) at t = {t}")]
    Blowup { t: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("diffusion matrix not positive semidefinite: min eigenvalue {min_eigenvalue:e} at state {state:?}")]
    NotPsd { min_eigenvalue: f64, state: Vec<f64> },

    #[error("flow left [{a}, {b}] at x = {x}")]
    FlowExit { a: f64, b: f64, x: f64 },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
