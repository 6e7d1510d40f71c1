use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the retrieval-and-deformation core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty neighbor target")]
    EmptyNeighborTarget,

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },

    #[error("zero extent")]
    ZeroExtent,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("empty part {0}")]
    EmptyPart(usize),

    #[error("indicator off sphere (norm {0})")]
    IndicatorOffSphere(f64),

    #[error("zero-norm feature cannot be normalized")]
    ZeroNorm,

    #[error("no surviving points after occlusion")]
    NoSurvivors,

    #[error("unreachable ratio {target} (best achieved {achieved})")]
    UnreachableRatio { target: f64, achieved: f64 },

    #[error("missing deformation parameters for part {0}")]
    MissingPart(usize),

    #[error("all points trimmed")]
    AllTrimmed,

    #[error("non-finite loss component `{0}`")]
    NonFiniteLoss(&'static str),

    #[error("training diverged at epoch {epoch}: loss {loss} exceeds {limit}")]
    Diverged { epoch: usize, loss: f64, limit: f64 },

    #[error("parse error in {file} [{section}] at byte {offset}: {message}")]
    Parse {
        file: String,
        section: String,
        offset: u64,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        file: impl Into<String>,
        section: impl Into<String>,
        offset: u64,
        message: impl Into<String>,
    ) -> Self {
        Error::Parse {
            file: file.into(),
            section: section.into(),
            offset,
            message: message.into(),
        }
    }
}
