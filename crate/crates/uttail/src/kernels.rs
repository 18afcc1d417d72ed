//! Scalar building blocks of the integrands: ordered space-time
//! configurations, the cubic-exponential factors f_ℓ, and Cauchy
//! determinants with the bounds used by truncation certificates.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numerics::LogComplex;

/// Total order on space-time points: earlier time first, ties broken by
/// smaller space coordinate.
pub fn point_precedes(a: (f64, f64), b: (f64, f64)) -> bool {
    // a = (alpha, tau)
    a.1 < b.1 || (a.1 == b.1 && a.0 < b.0)
}

/// An ordered configuration of m distinct space-time points (α_ℓ, τ_ℓ) with
/// thresholds β_ℓ. Construction sorts the inputs and rejects duplicates.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderedConfig {
    pub points: Vec<(f64, f64)>,
    pub betas: Vec<f64>,
}

impl OrderedConfig {
    pub fn new(points: Vec<(f64, f64)>, betas: Vec<f64>) -> Result<Self> {
        if points.len() != betas.len() {
            return Err(Error::Dimension(format!(
                "{} points but {} thresholds",
                points.len(),
                betas.len()
            )));
        }
        if points.is_empty() {
            return Err(Error::Dimension("empty configuration".into()));
        }
        let mut idx: Vec<usize> = (0..points.len()).collect();
        idx.sort_by(|&i, &j| {
            points[i]
                .1
                .total_cmp(&points[j].1)
                .then(points[i].0.total_cmp(&points[j].0))
        });
        for w in idx.windows(2) {
            if points[w[0]] == points[w[1]] {
                return Err(Error::DuplicatePoint(w[0].min(w[1]), w[0].max(w[1])));
            }
        }
        Ok(OrderedConfig {
            points: idx.iter().map(|&i| points[i]).collect(),
            betas: idx.iter().map(|&i| betas[i]).collect(),
        })
    }

    pub fn m(&self) -> usize {
        self.points.len()
    }

    /// Exponent parameters for each level: the absolute (α₁, τ₁, β₁) at ℓ=1
    /// and parameter gaps for ℓ ≥ 2.
    pub fn factors(&self) -> Vec<ExpFactorParams> {
        let mut out = Vec::with_capacity(self.m());
        out.push(ExpFactorParams {
            cubic: -self.points[0].1 / 3.0,
            quad: self.points[0].0,
            lin: self.betas[0],
        });
        for ell in 1..self.m() {
            out.push(ExpFactorParams {
                cubic: -(self.points[ell].1 - self.points[ell - 1].1) / 3.0,
                quad: self.points[ell].0 - self.points[ell - 1].0,
                lin: self.betas[ell] - self.betas[ell - 1],
            });
        }
        out
    }
}

/// Coefficients of the exponent of f(w) = exp(cubic·w³ + quad·w² + lin·w).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpFactorParams {
    pub cubic: f64,
    pub quad: f64,
    pub lin: f64,
}

impl ExpFactorParams {
    pub const ZERO: ExpFactorParams = ExpFactorParams {
        cubic: 0.0,
        quad: 0.0,
        lin: 0.0,
    };

    /// The complex exponent cubic·w³ + quad·w² + lin·w.
    #[inline]
    pub fn exponent(&self, w: Complex64) -> Complex64 {
        ((self.cubic * w + self.quad) * w + self.lin) * w
    }

    /// Real part of the exponent (the tracked decay rate along contours).
    #[inline]
    pub fn re_exponent(&self, w: Complex64) -> f64 {
        self.exponent(w).re
    }
}

/// f(w) in log form: exp(cubic·w³ + quad·w² + lin·w).
#[inline]
pub fn f_eval(params: ExpFactorParams, w: Complex64) -> LogComplex {
    LogComplex::exp_of(params.exponent(w))
}

/// Minimum distance between the two coordinate sets: min over pairs of
/// |w_i − w̃_j|. Returns +∞ if either set is empty.
pub fn dist(w: &[Complex64], wt: &[Complex64]) -> f64 {
    let mut d = f64::INFINITY;
    for a in w {
        for b in wt {
            d = d.min((a - b).norm());
        }
    }
    d
}

/// Cauchy determinant det[1/(w_i − w̃_j)] via the closed product formula
/// (−1)^{n(n−1)/2}·Π_{i<j}(w_j−w_i)(w̃_j−w̃_i) / Π_{i,j}(w_i−w̃_j),
/// evaluated in log space. The empty determinant is 1.
pub fn cauchy_det(w: &[Complex64], wt: &[Complex64]) -> Result<LogComplex> {
    let n = w.len();
    if n != wt.len() {
        return Err(Error::Dimension(format!(
            "cauchy_det needs equal lengths, got {n} and {}",
            wt.len()
        )));
    }
    let mut log_mag = 0.0;
    let mut phase = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let a = w[j] - w[i];
            let b = wt[j] - wt[i];
            log_mag += a.norm().ln() + b.norm().ln();
            phase += a.arg() + b.arg();
        }
    }
    for (i, wi) in w.iter().enumerate() {
        for (j, wtj) in wt.iter().enumerate() {
            let d = wi - wtj;
            if d.re == 0.0 && d.im == 0.0 {
                return Err(Error::Singularity { i, j });
            }
            log_mag -= d.norm().ln();
            phase -= d.arg();
        }
    }
    if n >= 2 && (n * (n - 1) / 2) % 2 == 1 {
        phase += std::f64::consts::PI;
    }
    Ok(LogComplex::new(log_mag, phase))
}

/// Cauchy determinant by the closed product formula in plain complex
/// arithmetic — the hot-loop variant of [`cauchy_det`]. Callers must
/// guarantee the two sets are separated (nodes on disjoint contours), so no
/// singularity checks are performed. The empty determinant is 1.
#[inline]
pub fn cauchy_det_direct(w: &[Complex64], wt: &[Complex64]) -> Complex64 {
    let n = w.len();
    debug_assert_eq!(n, wt.len());
    let mut num = Complex64::new(1.0, 0.0);
    for i in 0..n {
        for j in (i + 1)..n {
            num *= (w[j] - w[i]) * (wt[j] - wt[i]);
        }
    }
    let mut den = Complex64::new(1.0, 0.0);
    for wi in w {
        for wtj in wt {
            den *= wi - wtj;
        }
    }
    if n >= 2 && (n * (n - 1) / 2) % 2 == 1 {
        num = -num;
    }
    num / den
}

/// Hadamard-type bound |C(W; W̃)| ≤ n^{n/2}·dist^{−n}.
pub fn cauchy_bound(w: &[Complex64], wt: &[Complex64]) -> f64 {
    let n = w.len() as f64;
    let d = dist(w, wt);
    n.powf(n / 2.0) * d.powf(-n)
}

/// Bound for the concatenated determinant C(W⊔W′; W̃⊔W̃′) when the primed
/// and unprimed pairs are separated by at least `d`:
/// n^{n/2}·n′^{n′/2}·2^{(n+n′)/2}·d^{−(n+n′)}.
pub fn cauchy_bound_concat(n: usize, n_prime: usize, d: f64) -> f64 {
    let (a, b) = (n as f64, n_prime as f64);
    a.powf(a / 2.0) * b.powf(b / 2.0) * 2f64.powf((a + b) / 2.0) * d.powf(-(a + b))
}
