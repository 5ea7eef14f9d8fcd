use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HjsccError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("non-finite loss at step {step}; batch dump written to {dump:?}")]
    NonFinite { step: u64, dump: Option<PathBuf> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("config serialization error: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error(transparent)]
    Nn(#[from] hjscc_nn::NnError),
}

pub type Result<T, E = HjsccError> = std::result::Result<T, E>;
