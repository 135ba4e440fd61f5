use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Nd(#[from] ndcore::NdError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png {path}: {msg}")]
    Png { path: PathBuf, msg: String },
    /// Invalid configuration; `pointer` is a JSON pointer to the offending field.
    #[error("invalid config at {pointer}: {msg}")]
    Config { pointer: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("denoiser produced a non-finite output at step t={t}")]
    NonFiniteOutput { t: usize },
    #[error("training loss became non-finite at step {step}")]
    NanLoss { step: usize },
    #[error("embedder reached {accuracy:.3} eval accuracy, below the required {floor:.2}")]
    AccuracyFloor { accuracy: f64, floor: f64 },
    #[error(
        "mask coverage {target:.3} unreachable (got {achieved:.3} after {iterations} iterations)"
    )]
    CoverageUnreachable {
        target: f64,
        achieved: f64,
        iterations: usize,
    },
    #[error("evaluation failed on patch {patch} (seed {seed}): {source}")]
    Stage {
        patch: usize,
        seed: u64,
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn config(pointer: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            pointer: pointer.into(),
            msg: msg.into(),
        }
    }
}

/// Attaches a path to I/O errors.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
