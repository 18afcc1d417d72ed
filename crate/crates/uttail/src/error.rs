use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Contour spacings must satisfy 0 < a_2 < ... < a_m < 1.
    #[error("invalid contour spacings: {0}")]
    Spacing(String),

    /// Two coordinates of a Cauchy determinant coincide.
    #[error("cauchy determinant singular: |w_i - w~_j| = 0 at ({i}, {j})")]
    Singularity { i: usize, j: usize },

    /// Mismatched vector lengths in a kernel or query.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Two query points coincide; the ordering is undefined.
    #[error("duplicate point at indices {0} and {1}")]
    DuplicatePoint(usize, usize),

    /// Points violate the required ordering.
    #[error("order violation: {0}")]
    Order(String),

    /// Parameter outside the domain of the requested formula.
    #[error("domain error: {0}")]
    Domain(String),

    /// The series truncation certificate exceeds the target tolerance and the
    /// term cap is already at its ceiling (or the remaining terms are too
    /// expensive to evaluate).
    #[error(
        "truncation failure: certified remainder {certificate:.3e} exceeds target {target:.3e}"
    )]
    Truncation { certificate: f64, target: f64 },

    /// Converting a log-domain scalar to an ordinary complex number would
    /// overflow double precision.
    #[error("log-domain magnitude {log_mag} too large for exact conversion")]
    Overflow { log_mag: f64 },

    /// Malformed job document.
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
