use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input such as mismatched dimensions.
    #[error("input error: {0}")]
    Input(String),

    /// A numeric parameter is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Invalid mechanism or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Composition requested on a ledger that does not support it.
    #[error("accounting error: {0}")]
    Accounting(String),

    /// Theory constants could not be computed or are missing.
    #[error("constants error: {0}")]
    Constants(String),

    /// An inner solve failed to reach its tolerance.
    #[error("solver error: {message} (gradient norm {gradient_norm:.3e}, penalty {penalty:.3e}, iterations {iterations})")]
    Solver {
        message: String,
        gradient_norm: f64,
        penalty: f64,
        iterations: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_mismatch(what: &str, expected: usize, got: usize) -> Error {
    Error::Input(format!("{what}: expected length {expected}, got {got}"))
}
