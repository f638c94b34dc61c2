/// Errors surfaced by the modeling crate.
///
/// The split mirrors how callers should react: `InvalidParameter` and
/// `ShapeMismatch` are caller bugs or bad configuration, `RankDeficient`
/// means the requested construction does not exist for this input, and
/// `Numerical` means a computation ran but could not be trusted.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn rank(msg: impl Into<String>) -> Self {
        Error::RankDeficient(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
