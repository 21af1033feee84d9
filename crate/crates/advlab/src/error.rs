//! Error type shared across the crate.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failures surfaced by the public API.
///
/// The split mirrors how callers recover: `Config` and `Input` are caller
/// mistakes, `Format*` carry the exact byte offset or line of a malformed
/// file, `NonFinite` flags a violated numeric invariant, `Io` wraps the OS.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: mismatched shapes, bad hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid runtime input: out-of-range labels, wrong batch size.
    #[error("input error: {0}")]
    Input(String),

    /// A NaN or infinity crossed a public API boundary.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Malformed binary file; `offset` is the byte where parsing failed.
    #[error("format error at byte {offset}: {msg}")]
    FormatAtByte { offset: u64, msg: String },

    /// Malformed text file; `line` is 1-based.
    #[error("format error at line {line}: {msg}")]
    FormatAtLine { line: usize, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
