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
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("size mismatch for `{name}`: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        name: String,
        expected: u64,
        actual: u64,
    },
    #[error("unknown dtype tag `{0}`")]
    UnknownDtype(String),
    #[error("manifest version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("array `{0}` is not present in the manifest")]
    UnknownArray(String),
    #[error("array `{0}` contains non-finite values")]
    NonFinite(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("histogram of log-magnitude has no interior minimum; pass an explicit threshold (--threshold)")]
    UnimodalHistogram,
    #[error("mask is empty: {0}")]
    EmptyMask(String),
    #[error("solver produced a non-finite iterate at iteration {iteration}")]
    SolverBreakdown { iteration: usize },
    #[error("point set is degenerate (collinear or coplanar); cannot build a convex hull")]
    DegenerateHull,
    #[error(
        "phase matrix needs {required} bytes but the memory budget is {budget} bytes; use the split variant (--split-block)"
    )]
    MemoryBudget { required: u64, budget: u64 },
    #[error("invalid block partition: {0}")]
    InvalidBlocks(String),
    #[error("unknown {what} `{given}`; expected one of: {options}")]
    UnknownKind {
        what: &'static str,
        given: String,
        options: String,
    },
    #[error("dense oracle needs {elements} elements, above the cap of {cap}")]
    OracleCap { elements: usize, cap: usize },
    #[error("csv error: {0}")]
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
