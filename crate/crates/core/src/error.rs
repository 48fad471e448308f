use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // phantom
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("organ ellipsoids overlap: classes {0:?}")]
    OrganOverlap(Vec<(u8, u8)>),
    #[error("malformed sidecar {path}: {reason}")]
    MalformedSidecar { path: PathBuf, reason: String },
    #[error("dims {dims:?} imply {expected} values but payload {path} holds {actual}")]
    DimsMismatch {
        path: PathBuf,
        dims: [usize; 3],
        expected: usize,
        actual: usize,
    },
    #[error("payload {path} has {bytes} bytes, not a multiple of {width}")]
    PayloadLength {
        path: PathBuf,
        bytes: usize,
        width: usize,
    },
    #[error("unknown phase tag `{0}`")]
    UnknownPhase(String),

    // preprocess
    #[error("stage violation: {0}")]
    StageOrder(String),
    #[error("degenerate intensity range: 1st and 99th percentiles both {0}")]
    DegenerateIntensity(f64),
    #[error("no slice score within [{lo}, {hi}]")]
    EmptyCrop { lo: f64, hi: f64 },
    #[error("slice score count {got} does not match depth {depth}")]
    ScoreLength { got: usize, depth: usize },

    // sampler
    #[error("organ {0} absent from coarse mask")]
    OrganMissing(u8),
    #[error("attention emptied by augmentation after {0} attempts")]
    DegenerateAugmentation(usize),
    #[error("minibatch needs at least 2 patches, got {0}")]
    BatchTooSmall(usize),

    // dcc
    #[error("attention map has no nonzero pixel")]
    EmptyAttention,
    #[error("value {0} outside [0, 1]")]
    Domain(f64),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("no anchor has a positive pair")]
    EmptyLoss,

    // model / trainer
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("too few records: need {need}, got {got}")]
    TooFewRecords { need: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable dotted identifier used on the command line's stderr.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidSpec(_) => "phantom.invalid_spec",
            Error::OrganOverlap(_) => "phantom.overlap",
            Error::MalformedSidecar { .. } => "io.malformed_sidecar",
            Error::DimsMismatch { .. } => "io.dims_mismatch",
            Error::PayloadLength { .. } => "io.payload_length",
            Error::UnknownPhase(_) => "io.unknown_phase",
            Error::StageOrder(_) => "preprocess.stage_order",
            Error::DegenerateIntensity(_) => "preprocess.degenerate_intensity",
            Error::EmptyCrop { .. } => "preprocess.empty_crop",
            Error::ScoreLength { .. } => "preprocess.score_length",
            Error::OrganMissing(_) => "sampler.organ_missing",
            Error::DegenerateAugmentation(_) => "sampler.degenerate_augmentation",
            Error::BatchTooSmall(_) => "sampler.batch_too_small",
            Error::EmptyAttention => "dcc.empty_attention",
            Error::Domain(_) => "dcc.domain",
            Error::Temperature(_) => "dcc.temperature",
            Error::EmptyLoss => "dcc.empty_loss",
            Error::Shape(_) => "model.shape",
            Error::NonFinite(_) => "model.non_finite",
            Error::Checkpoint(_) => "model.checkpoint",
            Error::Config(_) => "config.invalid",
            Error::TooFewRecords { .. } => "analysis.too_few_records",
            Error::Io(_) => "io.error",
            Error::Json(_) => "io.json",
            Error::Csv(_) => "io.csv",
        }
    }
}
