use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor operands with incompatible shapes; carries both shapes.
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Invalid configuration value or unknown configuration key.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or empty input data.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite value or degenerate numeric state (e.g. fully masked
    /// attention row).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Operation invoked in an invalid graph or trainer state.
    #[error("state error: {0}")]
    State(String),

    /// Sequence exceeds a configured maximum length.
    #[error("length error: {0}")]
    Length(String),

    /// Caller violated an operation's contract.
    #[error("contract error: {0}")]
    Contract(String),

    /// Loss requested over zero contributing positions.
    #[error("empty loss: {0}")]
    EmptyLoss(String),

    /// Checkpoint serialization failures, one variant per defect class.
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Distinct checkpoint load failures; corruption of any length field maps
/// to one of these rather than a panic.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (not an abnet checkpoint)")]
    MagicMismatch,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: needed {needed} more bytes reading {context}")]
    Truncated { context: &'static str, needed: usize },
    #[error("extent/data disagreement for tensor {name}: extents {extents:?} vs {got} values")]
    ExtentMismatch {
        name: String,
        extents: Vec<usize>,
        got: usize,
    },
    #[error("malformed field {context}: {detail}")]
    Malformed {
        context: &'static str,
        detail: String,
    },
    #[error("{0} trailing bytes after final tensor")]
    TrailingBytes(usize),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
