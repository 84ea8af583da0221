use thiserror::Error;

/// Error taxonomy shared by every module in the crate.
///
/// `Shape` covers dimension disagreements, `DegenerateInput` covers inputs
/// that are structurally valid but carry no usable signal (empty scribbles,
/// zero-norm vectors, all-zero fixations), `Numeric` covers overflow and
/// non-finite values, `Format` covers container parsing with the byte offset
/// of the first bad byte, `Config` covers invalid configuration.
#[derive(Debug, Error)]
pub enum EgcError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EgcError>;
