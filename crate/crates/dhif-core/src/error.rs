//! Crate-wide error type and result alias.
//!
//! Every fallible public operation returns [`Result`]. The variants map onto
//! the process exit codes used by the `dhif` binary: config problems exit 2,
//! I/O problems exit 3, training divergence exits 4, and failed numerical
//! checks exit 1.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller passed a value that violates an operation precondition:
    /// mismatched shapes, zero-sized geometry, even kernel sizes, and so on.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An API usage rule was broken, e.g. a gradient tape fed to a layer
    /// other than the one that produced it.
    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// A configuration file could not be parsed or contained an unknown or
    /// out-of-range setting.
    #[error("config error: {0}")]
    Config(String),

    /// A data file (filter-bank dump, dataset manifest, PGM image,
    /// checkpoint) is malformed. Carries the offending line where the format
    /// is line oriented.
    #[error("parse error in {path}, line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// An underlying filesystem operation failed; `path` names the file the
    /// operation was working on.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The training loss became NaN or infinite. Reported instead of
    /// silently continuing so sweeps fail fast.
    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },

    /// Scene synthesis could not satisfy its placement constraints with the
    /// requested counts and canvas size.
    #[error("scene generation failed: {0}")]
    Generation(String),

    /// A numerical check ran to completion and found a violation (used by
    /// `dhif gradcheck`).
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl Error {
    /// Helper for attaching the path to a `std::io::Error`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the `dhif` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::CheckFailed(_) => 1,
            Error::InvalidArgument(_)
            | Error::ContractViolation(_)
            | Error::Config(_)
            | Error::Generation(_) => 2,
            Error::Parse { .. } | Error::Io { .. } => 3,
            Error::Diverged { .. } => 4,
        }
    }
}
