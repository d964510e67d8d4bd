use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("cannot normalize a zero-norm vector")]
    ZeroNorm,

    #[error("non-finite value in {context} at index {index} (value {value})")]
    NonFinite {
        context: &'static str,
        index: usize,
        value: f64,
    },

    #[error("forward tape is stale: parameters changed since the forward pass")]
    StaleTape,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("support pool too small: novel class {class} appears in {available} scenes, need {required}")]
    InsufficientPool {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("training diverged in {phase} at iteration {iteration}: loss = {loss}")]
    Diverged {
        phase: &'static str,
        iteration: usize,
        loss: f64,
    },

    #[error("model stage mismatch: {0}")]
    Stage(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
