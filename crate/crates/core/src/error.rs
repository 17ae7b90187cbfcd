use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("position ({x:.3}, {y:.3}) is not within {tolerance} m of any link")]
    OffGrid { x: f64, y: f64, tolerance: f64 },
    #[error("raster resolution too coarse: links {first} and {second} share cell ({row}, {col})")]
    Resolution {
        first: usize,
        second: usize,
        row: usize,
        col: usize,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace file {0} contains no samples")]
    EmptyTrace(PathBuf),
    #[error("range error: {0}")]
    Range(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("success ratio undefined: no nodes in the zone of interest during interval {interval}")]
    UndefinedRatio { interval: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch}, step {step}")]
    TrainingFailure { epoch: usize, step: usize },
    #[error("problem infeasible: the all-on scheme does not reach the target success ratio")]
    Infeasible,
    #[error("configuration invalid:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
    #[error("missing artifact {artifact}; run `{subcommand}` first")]
    Dependency { artifact: String, subcommand: String },
    #[error("unknown {kind} `{name}` (available: {available})")]
    Unknown {
        kind: &'static str,
        name: String,
        available: String,
    },
    #[error("io error on {path}: {source}")]
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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
