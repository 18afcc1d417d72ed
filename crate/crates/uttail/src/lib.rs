//! Numerical evaluation of multipoint upper-tail distributions of the KPZ
//! fixed point: the limiting contour-integral series, the pre-limit
//! (finite-L) tail formulas, the GUE Tracy–Widom oracle, and Brownian
//! crossover scans, together with the error machinery (log-domain
//! arithmetic, compensated summation, truncation certificates) needed to
//! evaluate them reliably in double precision.

pub mod airy;
pub mod contours;
pub mod crossover;
pub mod error;
pub mod field;
pub mod fredholm;
pub mod jobs;
pub mod kernels;
pub mod numerics;
pub mod prelimit;
pub mod tfunc;

pub use error::Error;
pub use numerics::{CompensatedSum, LogComplex};
