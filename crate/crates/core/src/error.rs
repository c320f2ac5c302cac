use std::path::PathBuf;

use thiserror::Error;

use crate::grid::Cell;

pub type Result<T> = std::result::Result<T, FmmError>;

#[derive(Debug, Error)]
pub enum FmmError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {file} at line {line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("duplicate (subject, s, t) observations at rows {rows:?}")]
    DuplicateRows { rows: Vec<usize> },

    #[error("data validation failed: {0}")]
    Validation(String),

    #[error("cell (r={}, l={}) has {observed} observed subjects, need at least {required}", cell.r, cell.l)]
    TooFewSubjects {
        cell: Cell,
        observed: usize,
        required: usize,
    },

    #[error("rank-deficient design at cell (r={}, l={}): column {column} is collinear with columns {with:?}", cell.r, cell.l)]
    Collinear {
        cell: Cell,
        column: usize,
        with: Vec<usize>,
    },

    #[error("near-singular design at cell (r={}, l={}): reciprocal condition {rcond:.3e}", cell.r, cell.l)]
    SingularCell { cell: Cell, rcond: f64 },

    #[error("invalid spline specification: {0}")]
    Spec(String),

    #[error("ill-conditioned smoother system (condition estimate {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error("GCV denominator is non-positive (edf {edf:.3} >= {n} cells); use fewer basis functions")]
    OverParameterized { edf: f64, n: usize },

    #[error("degenerate covariance: {0}")]
    Degenerate(String),

    #[error("dense variance evaluation refused: {cells} cells exceeds the guard of {guard} (pass --force-dense to override)")]
    DenseGuard { cells: usize, guard: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifacts in {dir}: {missing:?}")]
    MissingArtifacts { dir: PathBuf, missing: Vec<String> },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl FmmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FmmError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 usage, 3 data validation, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            FmmError::Config(_) => 2,
            FmmError::Io { .. }
            | FmmError::Parse { .. }
            | FmmError::DuplicateRows { .. }
            | FmmError::Validation(_)
            | FmmError::TooFewSubjects { .. }
            | FmmError::Collinear { .. }
            | FmmError::Dimension(_)
            | FmmError::MissingArtifacts { .. }
            | FmmError::Serde(_) => 3,
            FmmError::SingularCell { .. }
            | FmmError::Spec(_)
            | FmmError::IllConditioned { .. }
            | FmmError::OverParameterized { .. }
            | FmmError::Degenerate(_)
            | FmmError::DenseGuard { .. } => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FmmError::Io { .. } => "io",
            FmmError::Parse { .. } => "parse",
            FmmError::DuplicateRows { .. } => "duplicate_rows",
            FmmError::Validation(_) => "validation",
            FmmError::TooFewSubjects { .. } => "too_few_subjects",
            FmmError::Collinear { .. } => "collinear",
            FmmError::SingularCell { .. } => "singular_cell",
            FmmError::Spec(_) => "spline_spec",
            FmmError::IllConditioned { .. } => "ill_conditioned",
            FmmError::OverParameterized { .. } => "over_parameterized",
            FmmError::Degenerate(_) => "degenerate",
            FmmError::DenseGuard { .. } => "dense_guard",
            FmmError::Dimension(_) => "dimension",
            FmmError::Config(_) => "config",
            FmmError::MissingArtifacts { .. } => "missing_artifacts",
            FmmError::Serde(_) => "serde",
        }
    }
}
