//! Crate-wide error type.
//!
//! One enum covers every failure mode so the command-line layer can map an
//! error to its exit code without downcasting. Constructors take anything
//! `Display`-able; call sites are expected to say what was wrong and with
//! which value, e.g. `Error::data(format!("row 17: label 1.3 outside [0, 1]"))`.

use std::fmt::Display;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All errors the library reports.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed invocation or configuration: unknown flags, unknown config
    /// keys, values outside their documented domain.
    #[error("config error: {0}")]
    Config(String),

    /// Unusable input data: unreadable manifests or images, labels outside
    /// the normalised range, group bookkeeping problems, malformed weight
    /// files.
    #[error("data error: {0}")]
    Data(String),

    /// A numeric failure at run time: non-finite losses, invalid
    /// distribution parameters, degenerate geometry.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Tensor shapes that cannot be combined; the message carries both.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An I/O failure outside the parsing layers.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub fn data(msg: impl Display) -> Self {
        Error::Data(msg.to_string())
    }

    pub fn numeric(msg: impl Display) -> Self {
        Error::Numeric(msg.to_string())
    }

    pub fn shape(msg: impl Display) -> Self {
        Error::Shape(msg.to_string())
    }

    /// An I/O failure with call-site context folded into the message.
    pub fn io(msg: impl Display) -> Self {
        Error::Io(std::io::Error::other(msg.to_string()))
    }

    /// Process exit code for the command-line front end: `1` for usage and
    /// configuration problems, `2` for data problems, `3` for numeric
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Shape(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}
