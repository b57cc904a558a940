use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch at {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("class index {index} out of range for {num_classes} classes")]
    InvalidClass { index: usize, num_classes: usize },

    #[error("layer index {index} out of range ({count} parameterised layers)")]
    LayerIndex { index: usize, count: usize },

    #[error("the output layer cannot be permuted or rescaled")]
    OutputLayer,

    #[error("invalid permutation: {0}")]
    Permutation(String),

    #[error("symmetry precondition violated: {0}")]
    Symmetry(String),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("infeasible partition: {0}")]
    Partition(String),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
