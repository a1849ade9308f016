use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {kind}: {detail}")]
    Shape { kind: &'static str, detail: String },
    #[error("{kind} over index {index} which is not free in its operand")]
    IndexNotFree { kind: &'static str, index: String },
    #[error("extent mismatch: index {index} has extent {expected}, replacement has extent {found}")]
    ExtentMismatch { index: String, expected: usize, found: usize },
    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("{line}:{col}: unknown identifier `{name}`")]
    UnknownIdentifier { line: usize, col: usize, name: String },
    #[error("form `{form}` is not linear in argument `{argument}`")]
    Nonlinear { form: String, argument: String },
    #[error("restriction error: {0}")]
    Restriction(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("index value {value} out of range for extent {extent}")]
    OutOfRange { value: usize, extent: usize },
    #[error("dependency cycle among loop nests")]
    Cycle,
    #[error("duplicate kernel name `{0}`")]
    DuplicateKernel(String),
}

pub type Result<T> = std::result::Result<T, Error>;
