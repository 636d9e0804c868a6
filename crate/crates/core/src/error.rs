use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("line {line}: missing required field `{field}`")]
    MissingRequiredField { line: usize, field: &'static str },
    #[error("frame index {got} at line {line} does not follow {prev}")]
    NonMonotoneFrameIndex { line: usize, prev: u64, got: u64 },
    #[error("mouth width {width:e} is at or below the degeneracy threshold")]
    DegenerateMouthWidth { width: f64 },
    #[error("sequence `{video_id}` rejected: longest valid run {longest} < {required}")]
    SequenceRejected { video_id: String, longest: usize, required: usize },
    #[error("sequence `{0}` has no valid frames")]
    AllFramesInvalid(String),
    #[error("sequence of {len} frames is shorter than the {window} frame window")]
    SequenceTooShort { len: usize, window: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("forward cache is stale (cache step {cache}, params step {params})")]
    StaleCache { cache: u64, params: u64 },
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    DivergedTraining { epoch: usize, loss: f64 },
    #[error("dataset has a single class")]
    SingleClassDataset,
    #[error("scores contain a single class")]
    SingleClass,
    #[error("video has no windows")]
    EmptyVideo,
    #[error("pooled variance is zero")]
    ZeroPooledVariance,
    #[error("within-group variance is zero")]
    ZeroWithinVariance,
    #[error("series of length {len} is shorter than {min}")]
    SeriesTooShort { len: usize, min: usize },
    #[error("drop rate {0} must lie in [0, 1)")]
    DegenerateRate(f64),
    #[error("invalid statistic input: {0}")]
    InvalidInput(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("feature cache: {0}")]
    FeatureCache(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
