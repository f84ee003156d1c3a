use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    ManifestRow { path: PathBuf, line: u64, message: String },

    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("{path}:{line}: duplicate patch_id `{patch_id}` (first seen on line {first_line})")]
    DuplicatePatchId { path: PathBuf, line: u64, first_line: u64, patch_id: String },

    #[error("unknown attribute `{0}` (expected one of class, site, race, gender, age_bucket)")]
    UnknownAttribute(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("conditioning: {0}")]
    Conditioning(String),

    #[error(
        "conditioning width {cond} does not match timestep embedding width {timestep}: \
         d_class + k*d_e must equal d_t"
    )]
    WidthMismatch { cond: usize, timestep: usize },

    #[error("non-finite loss {loss} at step {step} (lr {lr}); batch patch ids: {batch_ids:?}")]
    NonFiniteLoss { loss: f64, step: u64, lr: f64, batch_ids: Vec<String> },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("schema fingerprint mismatch: checkpoint was trained on {expected}, manifest has {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{what}: {count} exceeds the configured cap of {cap}")]
    CapExceeded { what: String, count: u128, cap: u128 },

    #[error("toy dataset: {0}")]
    Toy(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
