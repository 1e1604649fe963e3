use alloc::string::String;
use core::fmt;

/// Crate-wide error type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CdreError {
    /// An input image or tensor was empty.
    EmptyInput,
    /// Codec quality outside `[1, 99]`.
    InvalidQuality(u8),
    /// A bitstream failed to parse; `offset` is the byte position of the
    /// first inconsistency.
    MalformedBitstream { offset: usize, reason: String },
    /// Two tensors that must agree in shape do not.
    ShapeMismatch { expected: String, got: String },
    /// Input smaller than the operation's minimum size.
    InputBelowMinimumSize,
    /// A scalar argument is out of its documented range.
    InvalidArgument(String),
    /// Non-finite values where finite values are required.
    NonFinite(String),
    /// A named component required by an operation is missing.
    MissingComponent(String),
    /// Checkpoint parse failure or config/parameter mismatch on load.
    CheckpointMismatch(String),
    /// Parameter group name not present in the checkpoint.
    UnknownGroup(String),
    /// Two rate-task curves have no overlapping metric range.
    DisjointQualityRanges,
    /// Curve metric is not strictly monotone in rate.
    NonMonotonicMetric,
    /// External pair manifest entry is invalid; carries the entry label.
    BadManifestEntry(String),
}

pub type Result<T> = core::result::Result<T, CdreError>;

impl fmt::Display for CdreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyInput => write!(f, "empty input"),
            Self::InvalidQuality(q) => write!(f, "invalid quality: {q} (expected 1..=99)"),
            Self::MalformedBitstream { offset, reason } => {
                write!(f, "malformed bitstream at byte {offset}: {reason}")
            }
            Self::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected}, got {got}")
            }
            Self::InputBelowMinimumSize => write!(f, "input below minimum size"),
            Self::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Self::NonFinite(what) => write!(f, "non-finite values in {what}"),
            Self::MissingComponent(name) => write!(f, "missing component: {name}"),
            Self::CheckpointMismatch(msg) => write!(f, "checkpoint mismatch: {msg}"),
            Self::UnknownGroup(name) => write!(f, "unknown parameter group: {name}"),
            Self::DisjointQualityRanges => write!(f, "disjoint quality ranges"),
            Self::NonMonotonicMetric => write!(f, "metric is not monotone in rate"),
            Self::BadManifestEntry(entry) => write!(f, "bad manifest entry: {entry}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CdreError {}

/// Shorthand for building a [`CdreError::ShapeMismatch`].
pub(crate) fn shape_mismatch(expected: &[usize], got: &[usize]) -> CdreError {
    CdreError::ShapeMismatch {
        expected: alloc::format!("{expected:?}"),
        got: alloc::format!("{got:?}"),
    }
}
