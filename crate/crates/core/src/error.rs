//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input tensor or image contains NaN/Inf where finite values are required.
    #[error("non-finite input: {0}")]
    NonFinite(String),

    /// Dimensions of two operands do not line up (or are not broadcastable).
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A configuration field failed validation.
    #[error("invalid config: field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    /// A layer name does not correspond to a backbone insertion point.
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    /// Prototype was extracted from a different frozen stem than the one in use.
    #[error("backbone fingerprint mismatch: prototype {prototype}, backbone {backbone}")]
    FingerprintMismatch { prototype: String, backbone: String },

    /// A serialized document violates its schema or invariants.
    #[error("schema error: {0}")]
    Schema(String),

    /// Dataset is empty or otherwise unusable.
    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("image decode: {0}")]
    ImageDecode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(String),
}

impl Error {
    pub fn invalid_config(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig { field: field.to_string(), reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
