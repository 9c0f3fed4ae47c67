use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} is outside the representable range (-{bound}, {bound})")]
    Range { value: f64, bound: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("artifact {0} was already consumed")]
    Reuse(u64),

    #[error("dealer exhausted: {0}")]
    DealerExhausted(String),

    #[error("protocol desync: {0}")]
    Desync(String),

    #[error("peer party aborted the run")]
    PeerAborted,

    #[error("order tag mismatch: {0}")]
    OrderMismatch(String),

    #[error("revealed mask is not binary at position {position} (value {value})")]
    NonBinary { position: usize, value: u64 },

    #[error("no cost model entry for {0}")]
    UnknownKind(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("material cache: {0}")]
    Cache(String),

    #[error("incomparable reports: {0}")]
    Incomparable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for failures raised by the protocol layer rather than by input or
    /// configuration problems.
    pub fn is_protocol(&self) -> bool {
        !matches!(self, Error::Config(_) | Error::Incomparable(_) | Error::Io(_) | Error::Csv(_))
    }
}
