use thiserror::Error;

/// Errors shared across the perception, feature, classification, control and
/// simulation layers.
#[derive(Error, Debug)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("registration failed: {0}")]
    Registration(String),

    #[error("window too short: need at least {need} samples, got {got}")]
    WindowTooShort { need: usize, got: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("did not converge: {0}")]
    NonConvergence(String),

    #[error("feature layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("malformed scenario: {0}")]
    Scenario(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
