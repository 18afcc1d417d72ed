//! Overflow-safe scalar arithmetic and deterministic reductions.
//!
//! The integrands evaluated elsewhere contain factors like e^{(4/3)L^{3/2}}
//! with L up to 40, far beyond the range of `f64`. All such products are
//! carried as [`LogComplex`] values (log-magnitude plus phase) and only
//! converted back to ordinary complex numbers when the running exponent has
//! been brought back into range. Sums of many small contributions use
//! Neumaier-compensated accumulation so that parallel reductions can be made
//! bit-reproducible by fixing the chunking.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// A complex scalar stored as `e^{log_mag} * e^{i phase}`.
///
/// `log_mag = -inf` encodes exact zero. Phases are wrapped into (-pi, pi]
/// after every multiplication, so arbitrarily long products never lose phase
/// accuracy to argument growth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogComplex {
    pub log_mag: f64,
    pub phase: f64,
}

/// Wrap an angle into (-pi, pi].
#[inline]
pub fn wrap_phase(p: f64) -> f64 {
    if (-PI..=PI).contains(&p) {
        return if p == -PI { PI } else { p };
    }
    let w = p.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else if w == 0.0 && p > 0.0 {
        // rem_euclid maps 2*pi to 0; keep exact zero only for true zero.
        0.0
    } else {
        w
    }
}

impl LogComplex {
    pub const ZERO: LogComplex = LogComplex {
        log_mag: f64::NEG_INFINITY,
        phase: 0.0,
    };
    pub const ONE: LogComplex = LogComplex {
        log_mag: 0.0,
        phase: 0.0,
    };

    #[inline]
    pub fn new(log_mag: f64, phase: f64) -> Self {
        LogComplex {
            log_mag,
            phase: wrap_phase(phase),
        }
    }

    /// The value e^{z} for a complex exponent z, without ever forming e^{Re z}.
    #[inline]
    pub fn exp_of(exponent: Complex64) -> Self {
        LogComplex::new(exponent.re, exponent.im)
    }

    #[inline]
    pub fn from_complex(z: Complex64) -> Self {
        if z.re == 0.0 && z.im == 0.0 {
            return LogComplex::ZERO;
        }
        LogComplex {
            log_mag: z.norm().ln(),
            phase: z.arg(),
        }
    }

    #[inline]
    pub fn from_real(x: f64) -> Self {
        if x == 0.0 {
            LogComplex::ZERO
        } else if x > 0.0 {
            LogComplex {
                log_mag: x.ln(),
                phase: 0.0,
            }
        } else {
            LogComplex {
                log_mag: (-x).ln(),
                phase: PI,
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.log_mag == f64::NEG_INFINITY
    }

    /// Exact conversion back to an ordinary complex number.
    ///
    /// Errors when the magnitude exceeds e^{700}: beyond that the conversion
    /// would overflow (or silently lose the controlled relative error), so the
    /// caller must first cancel exponents in log space.
    pub fn to_complex(&self) -> Result<Complex64> {
        if self.log_mag > 700.0 {
            return Err(Error::Overflow {
                log_mag: self.log_mag,
            });
        }
        Ok(self.to_complex_lossy())
    }

    /// Conversion that saturates to +-inf instead of erroring; for diagnostics.
    pub fn to_complex_lossy(&self) -> Complex64 {
        if self.is_zero() {
            return Complex64::new(0.0, 0.0);
        }
        let r = self.log_mag.exp();
        Complex64::new(r * self.phase.cos(), r * self.phase.sin())
    }

    #[inline]
    pub fn recip(&self) -> Self {
        LogComplex::new(-self.log_mag, -self.phase)
    }

    /// Multiply the value by e^{t} (shift the exponent).
    #[inline]
    pub fn scaled(&self, t: f64) -> Self {
        LogComplex {
            log_mag: self.log_mag + t,
            phase: self.phase,
        }
    }

    pub fn powi(&self, k: i32) -> Self {
        LogComplex::new(self.log_mag * k as f64, self.phase * k as f64)
    }
}

/// Multiply two log-domain scalars: log-magnitudes add, phases wrap.
#[inline]
pub fn log_mul(a: LogComplex, b: LogComplex) -> LogComplex {
    LogComplex::new(a.log_mag + b.log_mag, a.phase + b.phase)
}

impl std::ops::Mul for LogComplex {
    type Output = LogComplex;
    #[inline]
    fn mul(self, rhs: LogComplex) -> LogComplex {
        log_mul(self, rhs)
    }
}

impl std::ops::Div for LogComplex {
    type Output = LogComplex;
    #[inline]
    fn div(self, rhs: LogComplex) -> LogComplex {
        log_mul(self, rhs.recip())
    }
}

#[inline]
fn neumaier_step(sum: f64, comp: f64, x: f64) -> (f64, f64) {
    let t = sum + x;
    let c = if sum.abs() >= x.abs() {
        comp + ((sum - t) + x)
    } else {
        comp + ((x - t) + sum)
    };
    (t, c)
}

/// Neumaier-compensated complex accumulator.
///
/// For a fixed order of `add` calls the result is bitwise deterministic; the
/// compensation keeps the error of the total near one rounding of the exact
/// sum rather than growing with the term count.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    pub accumulator: Complex64,
    pub compensation: Complex64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, term: Complex64) {
        let (sre, cre) = neumaier_step(self.accumulator.re, self.compensation.re, term.re);
        let (sim, cim) = neumaier_step(self.accumulator.im, self.compensation.im, term.im);
        self.accumulator = Complex64::new(sre, sim);
        self.compensation = Complex64::new(cre, cim);
    }

    #[inline]
    pub fn add_real(&mut self, term: f64) {
        let (sre, cre) = neumaier_step(self.accumulator.re, self.compensation.re, term);
        self.accumulator.re = sre;
        self.compensation.re = cre;
    }

    /// Fold another partial sum into this one (used by the chunked reduction).
    pub fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.accumulator);
        self.add(other.compensation);
    }

    pub fn total(&self) -> Complex64 {
        self.accumulator + self.compensation
    }
}

/// Compensated total of a term sequence in its given order.
pub fn sum_compensated<I>(terms: I) -> Complex64
where
    I: IntoIterator<Item = Complex64>,
{
    let mut s = CompensatedSum::new();
    for t in terms {
        s.add(t);
    }
    s.total()
}

/// Chunk size of the deterministic reduction. Fixed so that results do not
/// depend on how many worker threads evaluate the chunks.
pub const REDUCTION_CHUNK: usize = 4096;

/// Sum `f(0) + ... + f(n-1)` with a fixed chunking: each chunk of
/// `REDUCTION_CHUNK` consecutive indices is summed sequentially (compensated),
/// chunks may be evaluated on any number of threads, and the per-chunk partial
/// sums are merged in chunk order. The result is bitwise identical for every
/// thread count.
pub fn deterministic_sum<F>(n: usize, f: F) -> Complex64
where
    F: Fn(usize) -> Complex64 + Sync + Send,
{
    use rayon::prelude::*;
    let n_chunks = n.div_ceil(REDUCTION_CHUNK);
    if n_chunks <= 1 {
        return sum_compensated((0..n).map(f));
    }
    let partials: Vec<CompensatedSum> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * REDUCTION_CHUNK;
            let hi = (lo + REDUCTION_CHUNK).min(n);
            let mut s = CompensatedSum::new();
            for i in lo..hi {
                s.add(f(i));
            }
            s
        })
        .collect();
    let mut total = CompensatedSum::new();
    for p in &partials {
        total.merge(p);
    }
    total.total()
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn log_mul_identity() {
        let x = LogComplex::new(3.7, 1.2);
        let r = log_mul(LogComplex::ONE, x);
        assert_eq!(r.log_mag, 3.7);
        assert_eq!(r.phase, 1.2);
    }

    #[test]
    fn log_mul_two_three_is_six() {
        let a = LogComplex::from_real(2.0);
        let b = LogComplex::from_real(3.0);
        let r = log_mul(a, b);
        assert!((r.log_mag - 6.0f64.ln()).abs() < 1e-15);
        assert_eq!(r.phase, 0.0);
    }

    #[test]
    fn log_mul_cancels_huge_exponents() {
        let a = LogComplex::new(800.0, 0.0);
        let b = LogComplex::new(-800.0, 0.0);
        let r = log_mul(a, b);
        assert_eq!(r.log_mag, 0.0);
        assert_eq!(r.phase, 0.0);
        assert_eq!(r.to_complex().unwrap(), c(1.0, 0.0));
    }

    #[test]
    fn to_complex_overflow_errors() {
        let x = LogComplex::new(800.0, 0.0);
        assert!(matches!(x.to_complex(), Err(Error::Overflow { .. })));
        assert!(LogComplex::new(700.0, 0.0).to_complex().is_ok());
    }

    #[test]
    fn zero_propagates() {
        let z = log_mul(LogComplex::ZERO, LogComplex::new(123.0, 0.5));
        assert!(z.is_zero());
        assert_eq!(z.to_complex().unwrap(), c(0.0, 0.0));
        assert!(LogComplex::from_real(0.0).is_zero());
    }

    #[test]
    fn phase_wraps_into_half_open_interval() {
        for k in -7..=7 {
            let p = 0.9 * PI + 2.0 * PI * k as f64;
            let w = wrap_phase(p);
            assert!(w > -PI && w <= PI, "wrapped {p} to {w}");
            assert!(((w - 0.9 * PI).abs() % (2.0 * PI)) < 1e-12);
        }
        assert_eq!(wrap_phase(PI), PI);
        assert_eq!(wrap_phase(-PI), PI);
        assert_eq!(wrap_phase(3.0 * PI), PI);
    }

    #[test]
    fn sum_compensated_small_examples() {
        assert_eq!(
            sum_compensated([c(1.0, 0.0), c(1e-16, 0.0), c(-1.0, 0.0)]),
            c(1e-16, 0.0)
        );
        assert_eq!(sum_compensated(std::iter::empty()), c(0.0, 0.0));
    }

    /// Exact value of a sum of doubles, via fixed-point big integers: every
    /// finite f64 is m * 2^e with e >= -1074, so scaling by 2^1074 gives an
    /// exact integer.
    fn exact_sum(values: impl Iterator<Item = f64>) -> BigInt {
        let mut acc = BigInt::from(0);
        for v in values {
            let (m, e) = frexp_int(v);
            let shift = 1074 + e;
            assert!(shift >= 0);
            acc += BigInt::from(m) << shift;
        }
        acc
    }

    /// Decompose a finite f64 as (integer mantissa, exponent) with v = m * 2^e.
    fn frexp_int(v: f64) -> (i64, i64) {
        if v == 0.0 {
            return (0, 0);
        }
        let bits = v.to_bits();
        let sign = if bits >> 63 == 1 { -1i64 } else { 1 };
        let exp = ((bits >> 52) & 0x7ff) as i64;
        let frac = (bits & ((1u64 << 52) - 1)) as i64;
        if exp == 0 {
            (sign * frac, -1074)
        } else {
            (sign * (frac + (1i64 << 52)), exp - 1075)
        }
    }

    fn big_to_f64(x: &BigInt) -> f64 {
        // x / 2^1074 with sufficient precision: use string of the leading part.
        let (sign, digits) = x.to_radix_be(2);
        let n = digits.len();
        let mut mant = 0u64;
        for &d in digits.iter().take(64) {
            mant = (mant << 1) | d as u64;
        }
        let extra = n.saturating_sub(64) as i32;
        let s = if sign == num_bigint::Sign::Minus {
            -1.0
        } else {
            1.0
        };
        s * mant as f64 * 2f64.powi(extra - 1074)
    }

    #[test]
    fn million_tenths_match_exact_oracle() {
        let n = 1_000_000usize;
        let total = sum_compensated((0..n).map(|_| c(0.1, 0.0)));
        let exact = exact_sum((0..n).map(|_| 0.1f64));
        let exact_f = big_to_f64(&exact);
        assert!(
            (total.re - exact_f).abs() < 1e-9,
            "compensated {} vs exact {}",
            total.re,
            exact_f
        );
        // And the plain statement from the contract: within 1e-9 of 1e5.
        assert!((total.re - 1e5).abs() < 1e-9);
    }

    #[test]
    fn ten_million_mixed_terms_error_bound() {
        // Error of the compensated sum stays below 2*eps*sum|terms| even for
        // 10^7 terms of mixed signs and scales.
        let n = 10_000_000usize;
        let term = |i: usize| {
            let x = (i as f64 * 0.7345912).sin() * 1e3 * (1.0 + ((i % 97) as f64) * 1e-4);
            if i % 3 == 0 {
                -x
            } else {
                x * 0.5
            }
        };
        let total = sum_compensated((0..n).map(|i| c(term(i), 0.0))).re;
        let exact = big_to_f64(&exact_sum((0..n).map(term)));
        let abs_budget: f64 = (0..n).map(|i| term(i).abs()).sum();
        assert!(
            (total - exact).abs() <= 2.0 * f64::EPSILON * abs_budget,
            "err {} budget {}",
            (total - exact).abs(),
            2.0 * f64::EPSILON * abs_budget
        );
    }

    #[test]
    fn deterministic_sum_matches_sequential_bitwise() {
        let term = |i: usize| {
            let x = (i as f64 * 0.11).cos() * (i as f64).sqrt();
            c(x, -0.3 * x)
        };
        let n = 50_000;
        let par = deterministic_sum(n, term);
        // Emulate the same chunked reduction sequentially.
        let mut total = CompensatedSum::new();
        for lo in (0..n).step_by(REDUCTION_CHUNK) {
            let mut chunk = CompensatedSum::new();
            for i in lo..(lo + REDUCTION_CHUNK).min(n) {
                chunk.add(term(i));
            }
            total.merge(&chunk);
        }
        assert_eq!(par, total.total());
    }

    proptest! {
        #[test]
        fn log_mul_matches_complex_mul(
            ar in -50.0f64..50.0, ai in -50.0f64..50.0,
            br in -50.0f64..50.0, bi in -50.0f64..50.0,
        ) {
            let a = c(ar, ai);
            let b = c(br, bi);
            prop_assume!(a.norm() > 1e-6 && b.norm() > 1e-6);
            let lhs = log_mul(LogComplex::from_complex(a), LogComplex::from_complex(b))
                .to_complex().unwrap();
            let rhs = a * b;
            prop_assert!((lhs - rhs).norm() <= 1e-12 * rhs.norm());
        }

        #[test]
        fn log_mul_associative_in_log_mag(
            la in -300.0f64..300.0, pa in -3.0f64..3.0,
            lb in -300.0f64..300.0, pb in -3.0f64..3.0,
            lc_ in -300.0f64..300.0, pc in -3.0f64..3.0,
        ) {
            let a = LogComplex::new(la, pa);
            let b = LogComplex::new(lb, pb);
            let d = LogComplex::new(lc_, pc);
            let left = log_mul(log_mul(a, b), d);
            let right = log_mul(a, log_mul(b, d));
            // Every intermediate magnitude is bounded by the sum of inputs.
            let scale = (la.abs() + lb.abs() + lc_.abs()).max(1.0);
            prop_assert!((left.log_mag - right.log_mag).abs() <= 2.0 * f64::EPSILON * scale);
            // Phases may differ only by a multiple of 2*pi (here: tiny wrap jitter).
            let dp = (left.phase - right.phase).abs();
            prop_assert!(dp < 1e-12 || (dp - 2.0 * PI).abs() < 1e-12);
        }

        #[test]
        fn compensated_sum_close_to_exact(values in prop::collection::vec(-1.0f64..1.0, 1..400)) {
            let total = sum_compensated(values.iter().map(|&v| c(v, 0.0))).re;
            let exact = big_to_f64(&exact_sum(values.iter().copied()));
            let budget: f64 = values.iter().map(|v| v.abs()).sum();
            prop_assert!((total - exact).abs() <= 2.0 * f64::EPSILON * budget.max(1e-300));
        }

        #[test]
        fn chunk_partition_does_not_change_total(
            values in prop::collection::vec(-1e6f64..1e6, 1..200),
            cuts in prop::collection::vec(0usize..200, 0..8),
        ) {
            let whole = sum_compensated(values.iter().map(|&v| c(v, v * 0.5)));
            let mut cutpoints: Vec<usize> =
                cuts.iter().map(|&k| k % values.len()).collect();
            cutpoints.push(0);
            cutpoints.push(values.len());
            cutpoints.sort_unstable();
            cutpoints.dedup();
            let mut merged = CompensatedSum::new();
            for w in cutpoints.windows(2) {
                let mut part = CompensatedSum::new();
                for &v in &values[w[0]..w[1]] {
                    part.add(c(v, v * 0.5));
                }
                merged.merge(&part);
            }
            let m = merged.total();
            // "Up to 4 ulp" determinism across partitions.
            let tol = 4.0 * f64::EPSILON * values.iter().map(|v| v.abs()).sum::<f64>().max(1e-300);
            prop_assert!((whole.re - m.re).abs() <= tol);
            prop_assert!((whole.im - m.im).abs() <= tol * 0.5 + tol);
        }
    }
}
