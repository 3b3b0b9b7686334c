use thiserror::Error;

pub type Result<T, E = DkmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DkmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Misuse of an API contract, e.g. calling backward twice on one tape.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("insufficient data: need at least {needed} sub-vectors, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(String),
}

impl DkmError {
    /// Stable machine-readable class name.
    pub fn class(&self) -> &'static str {
        match self {
            DkmError::Dimension(_) => "dimension",
            DkmError::Parameter(_) => "parameter",
            DkmError::Contract(_) => "contract",
            DkmError::Numeric(_) => "numeric",
            DkmError::InsufficientData { .. } => "insufficient-data",
            DkmError::Diverged { .. } => "diverged",
            DkmError::Format(f) => f.class(),
            DkmError::Config(_) => "config",
            DkmError::Io(_) => "io",
            DkmError::Serde(_) => "serialization",
        }
    }
}

impl From<serde_json::Error> for DkmError {
    fn from(e: serde_json::Error) -> Self {
        DkmError::Serde(e.to_string())
    }
}

impl From<csv::Error> for DkmError {
    fn from(e: csv::Error) -> Self {
        DkmError::Serde(e.to_string())
    }
}

/// Errors decoding or encoding a `.dkmz` compressed layer.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("{extra} trailing bytes after layer")]
    TrailingBytes { extra: usize },

    #[error("index {index} at position {position} does not fit in {bits} bits")]
    IndexOutOfRange { position: usize, index: u32, bits: u8 },

    #[error("invalid header: {0}")]
    InvalidHeader(String),
}

impl FormatError {
    pub fn class(&self) -> &'static str {
        match self {
            FormatError::BadMagic(_) => "format-bad-magic",
            FormatError::UnsupportedVersion(_) => "format-version",
            FormatError::Truncated { .. } => "format-truncated",
            FormatError::TrailingBytes { .. } => "format-trailing",
            FormatError::IndexOutOfRange { .. } => "format-index-range",
            FormatError::InvalidHeader(_) => "format-header",
        }
    }
}
