use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: degenerate scale {value:e} (minimum magnitude {min:e})")]
    DegenerateScale {
        op: &'static str,
        value: f32,
        min: f32,
    },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("capacity exceeded: requested {requested} positions, maximum is {max}")]
    Capacity { requested: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {pos}: {msg}")]
    Format { pos: u64, msg: String },

    #[error("accounting mismatch: analyzer reports {analyzer} bytes, runtime holds {runtime} bytes")]
    Accounting { analyzer: u64, runtime: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn format(pos: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            pos,
            msg: msg.into(),
        }
    }
}
