use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing column `{0}` in csv header")]
    MissingColumn(String),

    #[error("no parseable rows in {0}")]
    NoRows(String),

    #[error("row {row}: timestamp `{value}` is not ISO-8601 with an explicit UTC offset")]
    BadTimestamp { row: usize, value: String },

    #[error("file mixes station ids `{first}` and `{other}`")]
    MixedStations { first: String, other: String },

    #[error("time ranges do not overlap: [{a_start}, {a_end}] vs [{b_start}, {b_end}]")]
    DisjointRanges {
        a_start: i64,
        a_end: i64,
        b_start: i64,
        b_end: i64,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid frequency set: {0}")]
    InvalidFrequencies(String),

    #[error("series has no present values")]
    EmptySeries,

    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("model format version mismatch: found `{found}`, expected `{expected}`")]
    VersionMismatch { found: String, expected: String },

    #[error("inconsistent model shape: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("too few values to fit a sampling distribution: {survivors} survive outlier rejection")]
    TooFewSurvivors { survivors: usize },

    #[error("degenerate sampling distribution (zero spread)")]
    ZeroSpread,

    #[error("region needs at least {needed} complete rows, found {found}")]
    InsufficientRows { needed: usize, found: usize },

    #[error("region training data has zero total variance")]
    ZeroVariance,

    #[error("retained principal component {index} has zero variance")]
    DegenerateComponent { index: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("region `{0}` has no stations")]
    EmptyRegion(String),

    #[error("unknown station `{0}`")]
    UnknownStation(String),

    #[error("empty sweep grid")]
    EmptyGrid,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
