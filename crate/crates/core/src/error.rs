use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {dims:?}")]
    Shape { op: &'static str, dims: Vec<Vec<usize>> },

    #[error("softmax over a fully masked axis")]
    AllMasked,

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("action {action} is masked (partial solution {partial:?})")]
    MaskedAction { action: usize, partial: Vec<usize> },

    #[error("episode already finished")]
    Done,

    #[error("infeasible or incomplete solution: {0}")]
    Infeasible(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::Invalid(alloc::format!($($arg)*))
    };
}
pub(crate) use invalid;
