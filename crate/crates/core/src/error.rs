use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("non-finite training loss at epoch {epoch}, batch {batch} (step {step})")]
    Diverged { epoch: usize, batch: u64, step: u64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input to {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }
}
