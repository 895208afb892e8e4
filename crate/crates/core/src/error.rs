use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("{path}: line {line}, column {column}: cannot parse {token:?} as a number")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        token: String,
    },

    #[error("empty file: {0}")]
    EmptyFile(PathBuf),

    #[error(
        "shape mismatch: data is {data_rows}x{data_cols}, weights are {weight_rows}x{weight_cols}"
    )]
    ShapeMismatch {
        data_rows: usize,
        data_cols: usize,
        weight_rows: usize,
        weight_cols: usize,
    },

    #[error(
        "invalid weight {value} at row {row}, column {col}: weights must be finite and nonnegative"
    )]
    InvalidWeight { row: usize, col: usize, value: f64 },

    #[error("non-finite data cell with positive weight at row {row}, column {col}")]
    NonFiniteData { row: usize, col: usize },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("row {row} carries no information (all weights are zero)")]
    RowWithoutInformation { row: usize },

    #[error("dataset carries no information (all weights are zero)")]
    NoInformation,

    #[error("invalid unpacked dataset: {0}")]
    InvalidUnpacked(String),

    #[error("column {column} has total weight zero")]
    ZeroColumnWeight { column: usize },

    #[error("column pair ({first}, {second}) has total pair weight zero")]
    ZeroPairWeight { first: usize, second: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("covariance block for observed columns {pattern:?} is singular")]
    SingularBlock { pattern: Vec<usize> },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("variance factor undefined: E[W] = 0")]
    ZeroMeanWeight,

    #[error("need at least {required} weight samples, got {got}")]
    InsufficientSamples { required: usize, got: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
