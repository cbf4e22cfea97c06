use std::path::PathBuf;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("timestep {t} outside [1, {max}]")]
    TimestepRange { t: usize, max: usize },

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("degenerate projection direction (norm {norm:e})")]
    DegenerateDirection { norm: f64 },

    /// The projected vector is too short to be used; the caller should draw again.
    #[error("projection nearly parallel to the source direction (residual norm {norm:e})")]
    NearParallel { norm: f64 },

    #[error("orthogonal identity sampling failed after {attempts} near-parallel draws")]
    SamplingFailure { attempts: usize },

    #[error("numerical guard: {0}")]
    NumericalGuard(String),

    #[error("non-finite values produced at {context}")]
    NonFinite { context: String },

    #[error("non-finite loss at step {step} (t = {t}): {terms}")]
    NonFiniteLoss { step: usize, t: usize, terms: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("path already exists: {0} (pass overwrite to replace it)")]
    PathCollision(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 validation, 2 runtime or numerical, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::TimestepRange { .. }
            | Error::Config(_)
            | Error::PathCollision(_) => 1,
            Error::Io { .. } | Error::Image(_) | Error::Checkpoint(_) | Error::Dataset(_) => 3,
            _ => 2,
        }
    }
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Validation(msg()))
    }
}
