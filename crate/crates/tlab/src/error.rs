use thiserror::Error;

/// Crate-wide error type.
///
/// The CLI maps these onto process exit codes: configuration/contract
/// problems exit 2, numeric-input problems exit 3, and failed verification
/// suites exit 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad dimensions, unknown keys, out-of-range values.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller broke an operation's contract (label out of range, shape mismatch).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite or otherwise unusable numeric input.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A brute-force oracle was asked for an instance above its size guard.
    #[error("size guard exceeded: {0}")]
    SizeGuard(String),

    /// Parse or I/O failure for one of the on-disk formats.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
