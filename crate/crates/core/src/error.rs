use thiserror::Error;

/// Broad failure class, used by the command line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Invalid input, configuration or contract violation.
    Config,
    /// A numerical procedure failed (factorization, fit, divergence).
    Numeric,
    /// Reading or writing an artifact failed.
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("rejected geometry spec: {0}")]
    InvalidSpec(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("system assembly failed: {0}")]
    Assembly(String),

    #[error("linear solve did not converge (relative residual {residual:.3e}): {context}")]
    Numeric { context: String, residual: f64 },

    #[error("homogeneous conductivity fit failed: {0}; inspect the measurement data")]
    Fit(String),

    #[error("point {point:?} lies {distance:.3e} m outside the source mesh (tolerance {tolerance:.3e} m)")]
    OutOfDomain {
        point: [f64; 3],
        distance: f64,
        tolerance: f64,
    },

    #[error("phantom recipe infeasible: no admissible hemorrhage after {tries} draws")]
    RecipeInfeasible { tries: usize },

    #[error("hemorrhage does not fit inside the brain region: {0}")]
    Containment(String),

    #[error("ill-conditioned system: {0}")]
    Conditioning(String),

    #[error("pooling projection vector has zero norm")]
    DegenerateProjection,

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: String,
        found: u32,
        expected: u32,
    },

    #[error("corrupt file {path}: {message}")]
    Corrupt { path: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidMesh(_)
            | Error::InvalidSpec(_)
            | Error::Contract(_)
            | Error::OutOfDomain { .. }
            | Error::RecipeInfeasible { .. }
            | Error::Containment(_)
            | Error::Version { .. } => ErrorKind::Config,
            Error::Assembly(_)
            | Error::Numeric { .. }
            | Error::Fit(_)
            | Error::Conditioning(_)
            | Error::DegenerateProjection
            | Error::Training { .. } => ErrorKind::Numeric,
            Error::Corrupt { .. } | Error::Io { .. } => ErrorKind::Io,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl AsRef<std::path::Path>, message: impl ToString) -> Self {
        Error::Corrupt {
            path: path.as_ref().display().to_string(),
            message: message.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
