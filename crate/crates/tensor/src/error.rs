use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("graph function is not deterministic: {0}")]
    NonDeterministic(String),
}
