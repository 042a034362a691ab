use alloc::string::String;

/// Errors raised anywhere in the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("softmax row {row} has no allowed position")]
    FullyMaskedRow { row: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unfrozen parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("unknown camera id {0}")]
    UnknownCamera(usize),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    OutOfVocab { id: u32, vocab: usize },
    #[error("malformed sequence layout: {0}")]
    Layout(String),
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: u64, value: f32 },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
