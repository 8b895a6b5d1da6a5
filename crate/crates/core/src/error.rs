use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LensError> = std::result::Result<T, E>;

/// Every failure the engine can report.
#[derive(Debug, Error)]
pub enum LensError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("zero-norm vector: {context}")]
    ZeroNormVector { context: String },

    #[error("non-finite value: {context}")]
    NonFinite { context: String },

    #[error("empty set: {0}")]
    EmptySet(&'static str),

    #[error("singleton set: {0} needs at least two vectors")]
    SingletonSet(&'static str),

    #[error("missing blob {}", path.display())]
    MissingBlob { path: PathBuf },

    #[error("size mismatch in {}: expected {expected} bytes, found {found}", path.display())]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("invalid database: {0}")]
    InvalidDatabase(String),

    #[error("invalid probe set: {0}")]
    InvalidProbeSet(String),

    #[error("unknown component {0}")]
    UnknownComponent(String),

    #[error("unknown layer {0:?}")]
    UnknownLayer(String),

    #[error("unknown target {0:?}")]
    UnknownTarget(String),

    #[error("layer filter selects no layers")]
    EmptyLayerFilter,

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("k = {k} exceeds the number of rows ({n})")]
    KTooLarge { k: usize, n: usize },

    #[error("layer {0:?} has no relevance table")]
    MissingRelevance(String),

    #[error("no relevance edges available")]
    MissingEdges,

    #[error("probe set has no valid concepts")]
    NoValidConcepts,

    #[error("probe set has no spurious concepts")]
    NoSpuriousConcepts,

    #[error("probe set {0:?} has no null embedding (pass an explicit waiver to audit without one)")]
    MissingNull(String),

    #[error("degenerate response row {row}: max equals min")]
    DegenerateResponse { row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LensError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LensError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that mean "the database on disk is not a valid LensDB".
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            LensError::MissingBlob { .. }
                | LensError::SizeMismatch { .. }
                | LensError::CorruptManifest(_)
                | LensError::InvalidDatabase(_)
                | LensError::InvalidProbeSet(_)
                | LensError::ZeroNormVector { .. }
                | LensError::NonFinite { .. }
        )
    }
}
