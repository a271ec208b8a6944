use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    /// Shapes of the operands do not line up (channel counts, extents, rank).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// The requested geometry yields an empty result (e.g. a convolution
    /// whose output would have zero spatial extent).
    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    /// A scalar argument is out of its admissible range.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A tensor file did not match the expected binary layout.
    #[error("malformed tensor file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
