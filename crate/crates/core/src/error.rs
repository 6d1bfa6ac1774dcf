use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("pixel index ({ix}, {iy}) outside {nx}x{ny} grid")]
    IndexOutOfRange {
        ix: usize,
        iy: usize,
        nx: usize,
        ny: usize,
    },

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("assembling the operator needs about {required} bytes, budget is {budget}")]
    MemoryBudget { required: u64, budget: u64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
