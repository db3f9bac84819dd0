use thiserror::Error;

/// Crate-wide error type.
///
/// The CLI maps these onto process exit codes: config/usage problems exit 2,
/// numeric divergence exits 3, IO and file-format problems exit 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A forward pass produced NaN/Inf, or training diverged.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A node handle was used with a graph it does not belong to, or the
    /// backward seed is invalid.
    #[error("graph error: {0}")]
    Graph(String),

    /// Invalid argument outside shape concerns (bad class id, bad labels,
    /// empty input, malformed configuration value).
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed on-disk data (bad magic, truncated payload, bad dtype).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn graph(msg: impl Into<String>) -> Self {
        Error::Graph(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
