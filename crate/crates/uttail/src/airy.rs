//! The Airy function Ai and its derivative, evaluated through the same ray
//! quadrature used by the contour-integral series:
//!
//!   Ai(x)  = (1/2πi) ∫_Γ e^{−w³/3 + xw} dw,
//!   Ai′(x) = (1/2πi) ∫_Γ w·e^{−w³/3 + xw} dw,
//!
//! where Γ runs from ∞e^{−i2π/3} to ∞e^{i2π/3}. For x ≥ 0 the contour is a
//! wedge through the saddle at −√x; for x < 0 the two saddles sit at ±i√|x|
//! and the contour takes a vertical segment joining them with ±2π/3 rays
//! attached. A Maclaurin-series evaluation (accurate for |x| ≲ 8) serves as
//! an independent cross-check in tests.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::contours::{discretize, fit_radius, RayContour};
use crate::kernels::ExpFactorParams;

fn airy_contour(x: f64) -> RayContour {
    let mut c = if x >= 0.0 {
        RayContour::wedge(-x.sqrt().max(0.5), 2.0 * PI / 3.0)
    } else {
        let mut c = RayContour::wedge(0.0, 2.0 * PI / 3.0);
        c.flat_half_height = (-x).sqrt();
        c
    };
    let p = ExpFactorParams {
        cubic: -1.0 / 3.0,
        quad: 0.0,
        lin: x,
    };
    fit_radius(&mut c, |w| p.re_exponent(w), 1e-16);
    c
}

fn airy_quad(x: f64, with_w: bool) -> f64 {
    let c = airy_contour(x);
    // Node density follows the oscillation frequency on the vertical segment
    // (≈ |x| radians per unit at its center when x < 0).
    let npu = 6.max(x.abs().ceil() as usize);
    let nodes = discretize(&c, npu, 16);
    let mut acc = Complex64::new(0.0, 0.0);
    for &(w, wt) in &nodes {
        let e = (-w * w * w / 3.0 + x * w).exp();
        acc += wt * if with_w { w * e } else { e };
    }
    // The integral is purely imaginary for real x; dividing by 2πi leaves the
    // real value.
    (acc / Complex64::new(0.0, 2.0 * PI)).re
}

/// Airy function Ai(x) (relative accuracy ~1e-12 on [−20, 20]).
pub fn airy(x: f64) -> f64 {
    airy_quad(x, false)
}

/// Derivative Ai′(x).
pub fn airy_prime(x: f64) -> f64 {
    airy_quad(x, true)
}

/// Ai(0) = 1/(3^{2/3}·Γ(2/3)).
pub const AIRY_C1: f64 = 0.355_028_053_887_817_2;
/// −Ai′(0) = 1/(3^{1/3}·Γ(1/3)).
pub const AIRY_C2: f64 = 0.258_819_403_792_806_8;

/// Maclaurin-series evaluation of (Ai(x), Ai′(x)); loses accuracy past
/// |x| ≈ 8 from cancellation, used only as a cross-check oracle.
pub fn airy_series(x: f64) -> (f64, f64) {
    // Ai = c₁·f − c₂·g with f = Σ aₖ, aₖ ∝ x^{3k}, g = Σ bₖ, bₖ ∝ x^{3k+1}.
    let x3 = x * x * x;
    let (mut a, mut b) = (1.0f64, x);
    let (mut f, mut g) = (a, b);
    let (mut fp, mut gp) = (0.0f64, 1.0f64); // term-by-term derivatives
    for k in 0..200 {
        let kf = k as f64;
        a *= x3 / ((3.0 * kf + 2.0) * (3.0 * kf + 3.0));
        b *= x3 / ((3.0 * kf + 3.0) * (3.0 * kf + 4.0));
        f += a;
        g += b;
        // d/dx x^{3k+3} = (3k+3)x^{3k+2}; d/dx x^{3k+4} = (3k+4)x^{3k+3}.
        if x != 0.0 {
            fp += a * (3.0 * kf + 3.0) / x;
            gp += b * (3.0 * kf + 4.0) / x;
        }
        if a.abs() < 1e-300 && b.abs() < 1e-300 {
            break;
        }
    }
    (AIRY_C1 * f - AIRY_C2 * g, AIRY_C1 * fp - AIRY_C2 * gp)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values computed offline with 50-digit arithmetic,
    // rounded to f64.
    const AI_TABLE: &[(f64, f64, f64)] = &[
        // (x, Ai(x), Ai'(x))
        (-20.0, -0.1764061270779847, 0.8928628567364713),
        (-12.0, -0.06655517505437313, 1.0231104533679707),
        (-8.0, -0.0527050503563862, 0.9355609381983065),
        (-5.0, 0.35076100902411433, 0.32719281855444315),
        (-2.0, 0.22740742820168558, 0.618259020741691),
        (-1.0, 0.5355608832923521, -0.01016056711664521),
        (0.0, 0.3550280538878172, -0.2588194037928068),
        (0.5, 0.23169360648083348, -0.2249105326646839),
        (1.0, 0.13529241631288141, -0.1591474412967932),
        (2.0, 0.03492413042327438, -0.05309038443365363),
        (5.0, 0.00010834442813607442, -0.0002474138908684625),
        (8.0, 4.6922076160992316e-08, -1.3414392979067865e-07),
        (12.0, 1.3931846888753607e-13, -4.854736554985309e-13),
        (20.0, 1.6916728686705404e-27, -7.586391625748354e-27),
    ];

    #[test]
    fn contour_matches_reference_table() {
        for &(x, ai, aip) in AI_TABLE {
            let got = airy(x);
            let gotp = airy_prime(x);
            assert!(
                (got - ai).abs() <= 1e-10 * ai.abs(),
                "Ai({x}): {got} vs {ai}"
            );
            assert!(
                (gotp - aip).abs() <= 1e-9 * aip.abs(),
                "Ai'({x}): {gotp} vs {aip}"
            );
        }
    }

    #[test]
    fn contour_matches_series_on_central_range() {
        let mut x = -5.0;
        while x <= 5.0 {
            let (ai_s, aip_s) = airy_series(x);
            assert!((airy(x) - ai_s).abs() < 1e-10, "x = {x}");
            assert!((airy_prime(x) - aip_s).abs() < 1e-10, "x = {x}");
            x += 0.5;
        }
    }

    #[test]
    fn positive_axis_positive_decreasing() {
        let mut prev = f64::INFINITY;
        let mut x = 0.0;
        while x <= 12.0 {
            let v = airy(x);
            assert!(v > 0.0 && v < prev);
            prev = v;
            x += 0.25;
        }
    }

    #[test]
    fn airy_zero_value() {
        assert!((airy(0.0) - AIRY_C1).abs() < 1e-12);
        assert!((airy_prime(0.0) + AIRY_C2).abs() < 1e-12);
    }
}
