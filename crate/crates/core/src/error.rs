use thiserror::Error;

#[derive(Debug, Error)]
pub enum MxError {
    #[error("non-finite value {value} passed to {context}")]
    NonFinite { context: &'static str, value: f64 },

    #[error("empty input passed to {0}")]
    Empty(&'static str),

    #[error("block of {len} elements exceeds the {max}-element limit")]
    BlockTooLong { len: usize, max: usize },

    #[error("value {value} outside the representable range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("group-axis contract: left operand must be row-grouped and right operand column-grouped")]
    AxisContract,

    #[error("tape does not match this gradient: {0}")]
    TapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("bad container: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MxError>;
