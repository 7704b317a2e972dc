use thiserror::Error;

/// Errors raised across the workbench.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("evaluation does not belong to this graph (run forward_eval first)")]
    ForeignEvaluation,

    #[error("unknown node or name: {0}")]
    Unknown(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown region `{0}`")]
    UnknownRegion(String),

    #[error("unknown channel (layer {layer}, channel {channel})")]
    UnknownChannel { layer: usize, channel: usize },

    #[error("mask `{0}` is empty")]
    EmptyMask(String),

    #[error("layer spec cannot be synthesized: {0}")]
    UnsupportedSpec(String),

    #[error("conflicting plants on layer {layer}, channel {channel}")]
    ConflictingPlant { layer: usize, channel: usize },

    #[error("only {found} positives in {attempts} attempts (rate {rate:.3})")]
    InsufficientPositives {
        found: usize,
        attempts: usize,
        rate: f64,
    },

    #[error("gradient field is zero: {0}")]
    ZeroField(String),

    #[error("channel (layer {layer}, channel {channel}) has zero variance")]
    ZeroVariance { layer: usize, channel: usize },

    #[error("generator fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("degenerate probes: {0}")]
    DegenerateProbes(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// True for failures rooted in the numbers rather than in the request.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::ZeroField(_)
                | Error::ZeroVariance { .. }
                | Error::DegenerateProbes(_)
                | Error::InsufficientPositives { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
