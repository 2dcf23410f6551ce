use thiserror::Error;

/// Errors raised by the library. Configuration problems have their own
/// type in [`crate::config`] because they are reported in bulk.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("{what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("control outside the feasible set: {0}")]
    Infeasible(String),

    #[error("construction error: {0}")]
    Construction(String),

    #[error("support generation failed after {attempts} attempts: {reason}")]
    Generation { attempts: usize, reason: String },

    #[error("balancedness check did not solve cleanly: {0}")]
    Solver(String),

    #[error("game is not balanced: {0}")]
    Unbalanced(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(what: &'static str, got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            got,
            expected,
        })
    }
}

pub(crate) fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numeric(format!(
            "{what}[{i}] is not finite ({})",
            values[i]
        ))),
    }
}
