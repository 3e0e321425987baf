use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("degenerate box (cx={cx}, cy={cy}, w={w}, h={h})")]
    DegenerateBox { cx: f64, cy: f64, w: f64, h: f64 },

    #[error("class probabilities must sum to 1 (got {0})")]
    InvalidProbabilities(f64),

    #[error("class id {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),

    #[error("need at least as many predictions ({preds}) as ground truths ({gts})")]
    TooFewPredictions { preds: usize, gts: usize },

    #[error("instance too large for exhaustive enumeration ({0} ground truths, limit 8)")]
    TooLarge(usize),

    #[error("function is not deterministic: {0}")]
    NonDeterministic(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("gini is undefined for an all-zero input")]
    AllZero,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no ground truths in evaluation set")]
    NoGroundTruths,

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("metric columns of {0} are disjoint from the baseline")]
    DisjointMetrics(PathBuf),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidShape { .. } => "invalid_shape",
            Error::NotScalar(_) => "not_scalar",
            Error::DegenerateBox { .. } => "degenerate_box",
            Error::InvalidProbabilities(_) => "invalid_probabilities",
            Error::ClassOutOfRange { .. } => "class_out_of_range",
            Error::InvalidConfidence(_) => "invalid_confidence",
            Error::TooFewPredictions { .. } => "too_few_predictions",
            Error::TooLarge(_) => "too_large",
            Error::NonDeterministic(_) => "non_deterministic",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidConfig(_) => "invalid_config",
            Error::AllZero => "all_zero",
            Error::Empty(_) => "empty",
            Error::NoGroundTruths => "no_ground_truths",
            Error::Diverged { .. } => "diverged",
            Error::DisjointMetrics(_) => "disjoint_metrics",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
