use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("non-finite value at layer {layer} ({stage})")]
    NonFinite { layer: usize, stage: &'static str },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("corrupt model file: {0}")]
    CorruptModel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
