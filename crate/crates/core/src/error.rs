use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unregistered domain {0}")]
    UnknownDomain(u32),

    #[error("correlation undefined: saliency map has zero variance")]
    ZeroVariance,

    #[error("empty token sequence in {0}")]
    EmptySequence(&'static str),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("route lost: lateral deviation {0:.2} m")]
    RouteLost(f64),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Dimension {
        op,
        detail: detail.into(),
    })
}
