use std::path::PathBuf;

/// Errors raised by the library. Validation findings on trees are reported as
/// data (see [`crate::taxonomy::ValidationReport`]) rather than through this type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown family `{0}`")]
    UnknownFamily(String),

    #[error("unknown pair id `{0}`")]
    UnknownPair(String),

    #[error("pair `{pair_id}` listed with polarity {found} in a set that only holds {expected}")]
    PolarityMismatch {
        pair_id: String,
        expected: &'static str,
        found: &'static str,
    },

    #[error("no oracle rule for pair `{0}`")]
    NoOracleRule(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(&'static str),

    #[error("degenerate loser direction: |e - z_l| = {norm:e} below floor {floor:e}")]
    DegenerateLoserDirection { norm: f64, floor: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no preference pairs could be formed")]
    NoPairs,

    #[error("training diverged at {stage} step {step}: loss = {loss}")]
    Diverged {
        stage: &'static str,
        step: usize,
        loss: f64,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
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
}
