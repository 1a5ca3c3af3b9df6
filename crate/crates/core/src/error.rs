use std::path::PathBuf;

/// Errors produced by `oov-core`.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value for entity {entity} in field `{field}`")]
    NonFiniteFeature { entity: String, field: String },

    #[error("no features for entity {0}")]
    MissingFeatures(u64),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("embedding table is empty")]
    EmptyTable,

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("evaluation subset `{0}` is empty")]
    EmptySubset(String),

    #[error("item {0} appears more than once in the ranking")]
    DuplicateItem(u32),

    #[error("non-finite {what}: {diagnostics}")]
    NonFinite { what: String, diagnostics: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by numerics rather than inputs or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
