use std::path::PathBuf;

use thiserror::Error;

/// Which matrix failed a Cholesky factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdTarget {
    /// The random-effects covariance K.
    K,
    /// The m×m posterior precision K⁻¹ + S′D⁻¹S.
    Posterior,
    /// The p×p GLS information matrix X′Σ⁻¹X.
    Gls,
}

impl std::fmt::Display for PdTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PdTarget::K => f.write_str("K"),
            PdTarget::Posterior => f.write_str("K^-1 + S'D^-1 S"),
            PdTarget::Gls => f.write_str("X' Sigma^-1 X"),
        }
    }
}

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("latitude {0} outside [-90, 90]")]
    LatitudeOutOfRange(f64),

    #[error("resolution {resolution} has {found} knot(s); at least 2 are required")]
    TooFewKnots { resolution: usize, found: usize },

    #[error("resolution {resolution} contains duplicate knots (zero inter-knot distance)")]
    DuplicateKnots { resolution: usize },

    #[error("empty domain")]
    EmptyDomain,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{target} is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { target: PdTarget, pivot: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("estimation failed at iteration {iteration}: {source}")]
    Estimation {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("every b candidate failed to factorize in cycle {cycle}")]
    AllCandidatesFailed { cycle: usize },

    #[error("{}", match line { Some(l) => format!("data error at line {l}: {message}"), None => format!("data error: {message}") })]
    Data { line: Option<usize>, message: String },

    #[error("unsupported model file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn data(line: Option<usize>, message: impl Into<String>) -> Self {
        Error::Data {
            line,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) => ErrorKind::Usage,
            Error::NotPositiveDefinite { .. }
            | Error::NonFinite(_)
            | Error::Estimation { .. }
            | Error::AllCandidatesFailed { .. } => ErrorKind::Numerical,
            Error::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Data,
        }
    }

    /// True when the error is a positive-definiteness failure, possibly wrapped.
    pub fn is_not_pd(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. } => true,
            Error::Estimation { source, .. } => source.is_not_pd(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
