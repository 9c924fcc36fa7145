use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("image is {height}x{width}, smaller than the required {min}x{min}")]
    TooSmall { height: usize, width: usize, min: usize },

    #[error("spatial size {height}x{width} is not divisible by {multiple}")]
    NotDivisible {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("value {value} at index {index} lies outside [{lo}, {hi}]")]
    OutOfRange { index: usize, value: f64, lo: f64, hi: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iteration}: {breakdown}")]
    NonFiniteLoss { iteration: usize, breakdown: String },

    #[error("no pixels labelled {0}")]
    EmptyLabel(&'static str),

    #[error("{0}")]
    Invalid(String),
}
