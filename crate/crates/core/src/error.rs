use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every extent must be at least 1")]
    InvalidShape(Vec<usize>),

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f32 },

    #[error("quantization scale must be positive, got {0}")]
    InvalidScale(f32),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },

    #[error("packed payload holds {actual} words, expected {expected}")]
    WordCount { expected: usize, actual: usize },

    #[error("padding bits set beyond element {0}")]
    DirtyPadding(usize),

    #[error("unsupported precision {precision} for {network}")]
    UnsupportedPrecision { network: &'static str, precision: String },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("layer {0} has no weights loaded")]
    UninitializedWeights(usize),

    #[error("pixel value {0} outside [0, 255]")]
    PixelRange(i32),

    #[error("invalid fault target: {0}")]
    InvalidTarget(String),

    #[error("memory map for this target is empty")]
    EmptyMap,

    #[error("bit address {address} outside map of {total_bits} bits")]
    AddressOutOfRange { address: u64, total_bits: u64 },

    #[error("burst expansion requested for a single-bit fault site")]
    NotMbu,

    #[error("workload length must be at least 1")]
    EmptyWorkload,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("cannot summarize an empty outcome list")]
    NoOutcomes,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad magic in {what}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        what: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("truncated {what}: expected {expected} bytes, found {actual}")]
    Truncated {
        what: String,
        expected: u64,
        actual: u64,
    },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: size {size} is not a multiple of the {record}-byte record")]
    RecordSize {
        path: PathBuf,
        size: u64,
        record: u64,
    },

    #[error("model checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u16),

    #[error("malformed model file: {0}")]
    Malformed(String),

    #[error("degenerate batch-norm channel {channel}: gamma is zero")]
    DegenerateChannel { channel: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f32 },

    #[error("malformed fault-site CSV at line {line}: {reason}")]
    SiteCsv { line: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
