use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A block (or dense matrix, when `block` is `None`) failed Cholesky factorization.
    #[error("matrix is not positive definite ({context}, block {block:?})")]
    NotPositiveDefinite {
        context: &'static str,
        block: Option<usize>,
    },

    #[error("value outside its domain: {0}")]
    Domain(String),

    #[error("unsupported model structure: {0}")]
    UnsupportedStructure(String),

    #[error("initialization failed: {0}")]
    Initialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_check(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{what}: expected length {expected}, got {got}"
        )))
    }
}
