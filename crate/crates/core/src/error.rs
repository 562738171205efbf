use crate::sparse::Coord;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpanError {
    #[error("duplicate coordinate ({}, {})", .0.x, .0.y)]
    DuplicateCoordinate(Coord),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("operation requires a non-empty sparse map")]
    EmptyMap,
    #[error("rect ({x}, {y}) is not aligned to step {step}")]
    Misaligned { x: u32, y: u32, step: u32 },
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("stream truncated while reading {0}")]
    TruncatedStream(&'static str),
    #[error("malformed stream: {0}")]
    MalformedStream(String),
    #[error("rulebook mismatch: {0}")]
    RulebookMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model has no context token to classify from")]
    MissingContext,
    #[error("encoder output is missing the rulebook for stage {0}")]
    RulebookMissing(usize),
    #[error("value outside the valid domain: {0}")]
    DomainError(String),
    #[error("label index {label} out of range for {bins} bins")]
    IndexError { label: usize, bins: usize },
    #[error("cannot form {bins} quantile bins from {uncensored} uncensored samples")]
    DegenerateQuantiles { bins: usize, uncensored: usize },
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("brute-force oracle refuses {0} points (limit 500)")]
    TooLarge(usize),
    #[error("oracle output size is not positive")]
    NonPositiveOutputSize,
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

pub type Result<T, E = SpanError> = std::result::Result<T, E>;
