use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate box {index}: ({x1}, {y1}, {x2}, {y2})")]
    DegenerateBox {
        index: usize,
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty anchor grid")]
    EmptyGrid,

    #[error("shape mismatch in {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("non-finite value at anchor {index}")]
    NonFinite { index: usize },

    #[error("non-finite activation in {layer}")]
    NonFiniteActivation { layer: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("image format: {0}")]
    Image(String),

    #[error("unknown image {0:?}")]
    UnknownImage(String),

    #[error("weights container: {0}")]
    Weights(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }
}
