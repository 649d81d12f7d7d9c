use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GroodError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GroodError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite feature at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("bad magic bytes {found:?}, expected \"GRFD\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("label {label} at row {row} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: u32,
        num_classes: usize,
    },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("role contract violated: {0}")]
    RoleContract(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("class prototype {0} coincides with the OOD prototype")]
    DegenerateModel(usize),

    #[error("oracle split is not disjoint: {0}")]
    Disjointness(String),
}

impl GroodError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GroodError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            GroodError::Io { .. } | GroodError::MissingFile(_) => "io",
            GroodError::NonFinite { .. }
            | GroodError::BadMagic { .. }
            | GroodError::UnsupportedVersion(_)
            | GroodError::ChecksumMismatch { .. }
            | GroodError::Truncated { .. }
            | GroodError::LabelOutOfRange { .. }
            | GroodError::Malformed(_) => "format",
            GroodError::Manifest(_) | GroodError::RoleContract(_) => "manifest",
            GroodError::DimensionMismatch(_) => "dimension",
            GroodError::EmptyClass(_) | GroodError::Empty(_) => "empty",
            GroodError::InvalidParameter(_) => "parameter",
            GroodError::MissingInput(_) => "missing_input",
            GroodError::DegenerateModel(_) => "degenerate",
            GroodError::Disjointness(_) => "disjointness",
        }
    }
}
