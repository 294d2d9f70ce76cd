//! Error taxonomy shared across the toolkit.

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// The CLI maps these onto exit codes: anything that reaches the top level
/// is an operational failure (exit 2); argument parsing problems never
/// become an `Error` (exit 1 happens before the library is called).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shape or channel-count mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Argument outside its mathematical domain (e.g. non-positive gamma).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Missing, mismatched or undecodable data.
    #[error("data error: {0}")]
    Data(String),

    /// A model exceeds its parameter or byte budget.
    #[error("budget error: {0}")]
    Budget(String),

    /// Structural reparameterization cannot convert a node.
    #[error("conversion error: {0}")]
    Conversion(String),

    /// Checkpoint corrupt, truncated or checksum mismatch.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A pluggable metric or feature backend failed.
    #[error("backend '{name}' failed: {message}")]
    Backend { name: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
