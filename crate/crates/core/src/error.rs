use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input is outside the domain of an operation (invalid sequence,
    /// non-positive beta, unnormalized weights, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A recorded computation produced NaN or infinity.
    #[error("non-finite value produced by `{op}` (node {node}) in `{scope}`")]
    NonFinite {
        op: &'static str,
        node: usize,
        scope: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Enumeration would exceed the configured cap.
    #[error("enumeration of {required} sequences exceeds cap {cap}; raise the cap to at least {required}")]
    EnumerationCap { required: u128, cap: u128 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
