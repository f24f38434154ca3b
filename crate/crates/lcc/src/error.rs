use std::path::PathBuf;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CHECK_FAILED: i32 = 1;
    pub const DIVERGENCE: i32 = 2;
    pub const PRETRAIN_BUDGET: i32 = 3;
    pub const FINGERPRINT: i32 = 4;
    pub const MISSING_INPUT: i32 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("stream truncated: {found} bytes, at least {needed} required")]
    Truncated { needed: usize, found: usize },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("{extra} unexpected trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("malformed header: {0}")]
    Header(String),
}

#[derive(Debug, thiserror::Error)]
pub enum LccError {
    #[error(transparent)]
    Core(#[from] lcc_core::Error),
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("missing inputs:\n  {}", .0.join("\n  "))]
    Missing(Vec<String>),
    #[error("checkpoint fingerprint does not match its weights")]
    CorruptCheckpoint,
    #[error("{0}")]
    Usage(String),
    #[error("failed checks: {}", .0.join(", "))]
    ChecksFailed(Vec<String>),
}

impl LccError {
    pub fn exit_code(&self) -> i32 {
        use lcc_core::Error as E;
        match self {
            LccError::Core(E::Divergence { .. }) => exit::DIVERGENCE,
            LccError::Core(E::RecallNotReached { .. }) => exit::PRETRAIN_BUDGET,
            LccError::Core(E::IncompatibleModel) | LccError::CorruptCheckpoint => exit::FINGERPRINT,
            LccError::ChecksFailed(_) => exit::CHECK_FAILED,
            _ => exit::MISSING_INPUT,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return LccError::Missing(vec![path.display().to_string()]);
        }
        LccError::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, LccError>;
