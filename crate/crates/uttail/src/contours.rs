//! Integration contours: nested families of left/right wedge contours and
//! their discretization into Gauss–Legendre panel quadratures.
//!
//! Left contours are wedges with rays at angles ±2π/3 whose apex sits on the
//! real axis left of −1 ± a_ℓ. Right contours use a bent shape: a vertical
//! segment of half-height cot(2π/5) through the apex with rays at ±π/5
//! attached to its ends. The ±π/5 angle keeps 1/f integrable even when two
//! query points share a time (quadratic decay); callers with strictly ordered
//! times may request plain ±π/3 wedges instead, which decay faster.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// From ∞·e^{i·lower_angle} up through the apex region to ∞·e^{i·upper_angle}.
    LowerToUpper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RightAngle {
    /// Bent contour with vertical center segment and ±π/5 rays (default; valid
    /// for equal-time configurations).
    FifthPi,
    /// Plain ±π/3 wedge; only valid when all times are strictly ordered.
    ThirdPi,
}

#[derive(Clone, Debug)]
pub struct RayContour {
    pub apex: Complex64,
    pub upper_angle: f64,
    pub lower_angle: f64,
    /// Half-height of the vertical segment through the apex; 0 for a plain wedge.
    pub flat_half_height: f64,
    /// Length of each ray kept by the quadrature.
    pub truncation_radius: f64,
    pub orientation: Orientation,
}

impl RayContour {
    /// Plain wedge: two rays meeting at `apex_re` on the real axis, at angles
    /// ±`angle`.
    pub fn wedge(apex_re: f64, angle: f64) -> Self {
        RayContour {
            apex: Complex64::new(apex_re, 0.0),
            upper_angle: angle,
            lower_angle: -angle,
            flat_half_height: 0.0,
            truncation_radius: 12.0,
            orientation: Orientation::LowerToUpper,
        }
    }

    /// Bent right-family shape: vertical segment of half-height cot(2π/5)
    /// through `apex_re`, rays at ±π/5 from the segment ends.
    pub fn bent_right(apex_re: f64) -> Self {
        RayContour {
            apex: Complex64::new(apex_re, 0.0),
            upper_angle: PI / 5.0,
            lower_angle: -PI / 5.0,
            flat_half_height: 1.0 / (2.0 * PI / 5.0).tan(),
            truncation_radius: 12.0,
            orientation: Orientation::LowerToUpper,
        }
    }

    /// The contour scaled by `k > 0` about the origin ({k·z : z ∈ Γ}).
    pub fn scaled(&self, k: f64) -> Self {
        RayContour {
            apex: self.apex * k,
            upper_angle: self.upper_angle,
            lower_angle: self.lower_angle,
            flat_half_height: self.flat_half_height * k,
            truncation_radius: self.truncation_radius * k,
            orientation: self.orientation,
        }
    }

    /// The contour translated by a real shift.
    pub fn translated(&self, dx: f64) -> Self {
        let mut c = self.clone();
        c.apex += Complex64::new(dx, 0.0);
        c
    }

    /// Straight pieces in traversal order (lower far end → upper far end).
    /// The vertical segment, when present, is split at the real axis so node
    /// layouts are symmetric under conjugation and never touch the axis.
    pub fn pieces(&self) -> Vec<(Complex64, Complex64)> {
        let h = Complex64::new(0.0, self.flat_half_height);
        let lo_end = self.apex - h;
        let hi_end = self.apex + h;
        let lo_far = lo_end + Complex64::from_polar(self.truncation_radius, self.lower_angle);
        let hi_far = hi_end + Complex64::from_polar(self.truncation_radius, self.upper_angle);
        let mut ps = vec![(lo_far, lo_end)];
        if self.flat_half_height > 0.0 {
            ps.push((lo_end, self.apex));
            ps.push((self.apex, hi_end));
        }
        ps.push((hi_end, hi_far));
        ps
    }

    /// Total arc length of the truncated contour.
    pub fn arc_length(&self) -> f64 {
        2.0 * self.truncation_radius + 2.0 * self.flat_half_height
    }

    /// Distance from `p` to the contour as a geometric locus (rays extended
    /// well past the truncation radius, so the answer does not depend on it).
    pub fn distance_to(&self, p: Complex64) -> f64 {
        let mut far = self.clone();
        far.truncation_radius = 1e4;
        far.pieces()
            .iter()
            .map(|&(a, b)| segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }
}

fn segment_distance(p: Complex64, a: Complex64, b: Complex64) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_sqr();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = (((p - a).re * ab.re + (p - a).im * ab.im) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Gauss–Legendre nodes and weights on [−1, 1], by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // p2 = P_n(x), p1 = P_{n-1}(x)
            let (mut p1, mut p2) = (1.0, x);
            for k in 2..=n {
                let p0 = p1;
                p1 = p2;
                p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
            }
            if n == 1 {
                p2 = x;
                p1 = 1.0;
            }
            dp = n as f64 * (x * p2 - p1) / (x * x - 1.0);
            let dx = p2 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        xs[i] = -x;
        ws[i] = w;
        xs[n - 1 - i] = x;
        ws[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        xs[n / 2] = 0.0;
    }
    (xs, ws)
}

/// Discretize one straight piece from `a` to `b` into `n_panels` equal
/// Gauss–Legendre panels of order `order`, appending (node, weight) pairs.
fn discretize_piece(
    a: Complex64,
    b: Complex64,
    n_panels: usize,
    order: usize,
    out: &mut Vec<(Complex64, Complex64)>,
) {
    let (xs, ws) = gauss_legendre(order);
    let dir = b - a;
    let np = n_panels as f64;
    for p in 0..n_panels {
        let t0 = p as f64 / np;
        let t1 = (p + 1) as f64 / np;
        let mid = 0.5 * (t0 + t1);
        let half = 0.5 * (t1 - t0);
        for (x, w) in xs.iter().zip(&ws) {
            let t = mid + half * x;
            out.push((a + dir * t, dir * (w * half)));
        }
    }
}

/// Discretize a contour into (node, weight) pairs such that Σ w·f(node)
/// approximates ∫ f dz along the contour in its orientation. Panels are
/// uniform with about `nodes_per_unit` nodes per unit arc length, each panel
/// carrying a Gauss–Legendre rule of order `panel_order`.
pub fn discretize(
    contour: &RayContour,
    nodes_per_unit: usize,
    panel_order: usize,
) -> Vec<(Complex64, Complex64)> {
    assert!(nodes_per_unit >= 1 && panel_order >= 2);
    let mut out = Vec::new();
    for (a, b) in contour.pieces() {
        let len = (b - a).norm();
        if len == 0.0 {
            continue;
        }
        let n_panels = ((len * nodes_per_unit as f64 / panel_order as f64).ceil() as usize).max(1);
        discretize_piece(a, b, n_panels, panel_order, &mut out);
    }
    out
}

/// Discretize with panel lengths graded away from the apex: h(s) =
/// θ·(d₀ + 0.3·s), where s is arc length from the apex, d₀ = `sing_dist` is
/// the distance to the nearest singularity of the integrand, and
/// θ = 4·`panel_tol`^(1/(2·order)). A Gauss–Legendre panel of length h whose
/// nearest pole is at distance d contributes a relative error of roughly
/// (h/4d)^(2·order), so this grading holds each panel near `panel_tol` while
/// the panels grow along the rays where the integrand has decayed.
pub fn discretize_graded(
    contour: &RayContour,
    panel_order: usize,
    sing_dist: f64,
    panel_tol: f64,
) -> Vec<(Complex64, Complex64)> {
    assert!(panel_order >= 2);
    assert!(sing_dist > 0.0 && panel_tol > 0.0 && panel_tol < 1.0);
    let theta = 4.0 * panel_tol.powf(1.0 / (2.0 * panel_order as f64));
    let h_at = |s: f64| (theta * (sing_dist + 0.3 * s)).max(0.02);
    let pieces = contour.pieces();
    let lens: Vec<f64> = pieces.iter().map(|&(a, b)| (b - a).norm()).collect();
    // The apex always sits at the boundary after the first half of the pieces
    // (lower ray | [lower segment | upper segment] | upper ray).
    let apex_cum: f64 = lens[..pieces.len() / 2].iter().sum();
    let mut out = Vec::new();
    let mut cum = 0.0;
    for (&(a, b), &len) in pieces.iter().zip(&lens) {
        if len > 0.0 {
            let after_apex = cum + 1e-12 >= apex_cum;
            // Cut positions along the piece, measured from its apex-side end.
            let mut cuts = vec![0.0f64];
            let mut s = 0.0;
            while s < len - 1e-12 {
                let from_apex = if after_apex {
                    cum + s - apex_cum
                } else {
                    apex_cum - (cum + len) + s
                };
                s = (s + h_at(from_apex)).min(len);
                cuts.push(s);
            }
            let at = |from: Complex64, to: Complex64, s: f64| from + (to - from) * (s / len);
            if after_apex {
                for w in cuts.windows(2) {
                    discretize_piece(at(a, b, w[0]), at(a, b, w[1]), 1, panel_order, &mut out);
                }
            } else {
                // Grading runs from b (apex side) toward a; emit in a→b order.
                for w in cuts.windows(2).rev() {
                    discretize_piece(at(b, a, w[1]), at(b, a, w[0]), 1, panel_order, &mut out);
                }
            }
        }
        cum += len;
    }
    out
}

/// Like [`discretize_graded`], but for integrands dominated by an exponential
/// factor e^{p(w)} whose variation scale 1/|p′(w)| shrinks along the rays
/// faster than the pole distance grows. A Gauss–Legendre panel of length h
/// resolves the factor only while h·|p′| stays moderate — the relative error
/// behaves like (h·|p′|/4)^(2·order) — so each panel is additionally capped by
/// the local scale `1/dlog_mag(w)`. The budget is weighted by how far the
/// factor has decayed below its peak (`re_exponent` relative to the contour
/// maximum): panels in decayed regions may err more, keeping the extra
/// refinement confined to the region that actually contributes.
pub fn discretize_graded_exp(
    contour: &RayContour,
    panel_order: usize,
    sing_dist: f64,
    panel_tol: f64,
    re_exponent: impl Fn(Complex64) -> f64,
    dlog_mag: impl Fn(Complex64) -> f64,
) -> Vec<(Complex64, Complex64)> {
    assert!(panel_order >= 2);
    assert!(sing_dist > 0.0 && panel_tol > 0.0 && panel_tol < 1.0);
    let inv2o = 1.0 / (2.0 * panel_order as f64);
    let pieces = contour.pieces();
    let lens: Vec<f64> = pieces.iter().map(|&(a, b)| (b - a).norm()).collect();
    let mut peak = f64::NEG_INFINITY;
    for &(a, b) in &pieces {
        for k in 0..=64 {
            peak = peak.max(re_exponent(a + (b - a) * (k as f64 / 64.0)));
        }
    }
    let ln_tol = panel_tol.ln();
    let h_at = |from_apex: f64, w: Complex64| -> f64 {
        let d_pole = sing_dist + 0.3 * from_apex;
        // How far the exponential factor has decayed below its peak here.
        let excess = (re_exponent(w) - peak).min(0.0);
        // Budget-weighted panel factor: θ_w = 4·(tol/e^excess)^(1/2o), capped
        // at 8 so panels in fully dead regions still advance geometrically.
        let theta_w = 4.0 * (((ln_tol - excess) * inv2o).min(std::f64::consts::LN_2)).exp();
        let d = if excess < ln_tol + DEAD_MARGIN_LN {
            d_pole
        } else {
            d_pole.min(1.0 / dlog_mag(w).max(1e-9))
        };
        (theta_w * d).max(0.02)
    };
    let apex_cum: f64 = lens[..pieces.len() / 2].iter().sum();
    let mut out = Vec::new();
    let mut cum = 0.0;
    for (&(a, b), &len) in pieces.iter().zip(&lens) {
        if len > 0.0 {
            let after_apex = cum + 1e-12 >= apex_cum;
            let at = |from: Complex64, to: Complex64, s: f64| from + (to - from) * (s / len);
            let mut cuts = vec![0.0f64];
            let mut s = 0.0;
            while s < len - 1e-12 {
                let (from_apex, w) = if after_apex {
                    (cum + s - apex_cum, at(a, b, s))
                } else {
                    (apex_cum - (cum + len) + s, at(b, a, s))
                };
                s = (s + h_at(from_apex, w)).min(len);
                cuts.push(s);
            }
            if after_apex {
                for w in cuts.windows(2) {
                    discretize_piece(at(a, b, w[0]), at(a, b, w[1]), 1, panel_order, &mut out);
                }
            } else {
                for w in cuts.windows(2).rev() {
                    discretize_piece(at(b, a, w[1]), at(b, a, w[0]), 1, panel_order, &mut out);
                }
            }
        }
        cum += len;
    }
    out
}

/// Below this margin under the panel tolerance the exponential factor no
/// longer constrains panel length (its contribution is already negligible).
const DEAD_MARGIN_LN: f64 = -6.9;

/// Raise the truncation radius until the tracked log-magnitude at both ray
/// endpoints is below (peak along the contour) + log(trunc_tol) − 5 and
/// still falling, so truncation is controlled relative to the integrand's
/// own scale. `re_exponent` gives the real part of the integrand's exponent.
pub fn fit_radius(
    contour: &mut RayContour,
    re_exponent: impl Fn(Complex64) -> f64,
    trunc_tol: f64,
) {
    let h = Complex64::new(0.0, contour.flat_half_height);
    let ends = [
        (contour.apex + h, contour.upper_angle),
        (contour.apex - h, contour.lower_angle),
    ];
    let at = |r: f64, (end, ang): (Complex64, f64)| re_exponent(end + Complex64::from_polar(r, ang));
    // Peak magnitude over the central segment and the near part of the rays.
    let mut peak = f64::NEG_INFINITY;
    for k in 0..=64 {
        let t = (k as f64 / 64.0) * 2.0 - 1.0;
        peak = peak.max(re_exponent(contour.apex + h * t));
        for &e in &ends {
            peak = peak.max(at(t.abs() * 3.0, e));
        }
    }
    let target = peak + trunc_tol.ln() - 5.0;
    let mut r = 2.0f64;
    while r < 200.0 {
        let ok = ends.iter().all(|&e| {
            at(r, e) <= target && at(r * 1.2, e) < at(r, e) && at(r * 1.5, e) < at(r * 1.2, e)
        });
        if ok {
            break;
        }
        r *= 1.25;
    }
    contour.truncation_radius = r;
}

#[derive(Clone, Debug)]
pub struct ContourFamily {
    /// Left in-contours for levels ℓ = 2..m (index ℓ−2), apexes −1 − a_ℓ.
    pub left_in: Vec<RayContour>,
    /// Left out-contours, apexes −1 + a_ℓ.
    pub left_out: Vec<RayContour>,
    /// Right in-contours, apexes 1 + a_ℓ.
    pub right_in: Vec<RayContour>,
    /// Right out-contours, apexes 1 − a_ℓ.
    pub right_out: Vec<RayContour>,
    /// Strictly increasing spacings a_2 < … < a_m in (0, 1).
    pub spacings: Vec<f64>,
    /// Guaranteed minimum distance between distinct contours and from any
    /// contour to the points ∓1.
    pub min_separation: f64,
}

impl ContourFamily {
    pub fn left_in(&self, ell: usize) -> &RayContour {
        &self.left_in[ell - 2]
    }
    pub fn left_out(&self, ell: usize) -> &RayContour {
        &self.left_out[ell - 2]
    }
    pub fn right_in(&self, ell: usize) -> &RayContour {
        &self.right_in[ell - 2]
    }
    pub fn right_out(&self, ell: usize) -> &RayContour {
        &self.right_out[ell - 2]
    }
    pub fn m(&self) -> usize {
        self.spacings.len() + 1
    }
}

/// Evenly spread default spacings a_ℓ = (ℓ−1)/m.
pub fn default_spacings(m: usize) -> Vec<f64> {
    (2..=m).map(|ell| (ell - 1) as f64 / m as f64).collect()
}

/// Build the nested contour family for an m-point evaluation.
///
/// Left wedges sit at apexes −1 ∓ a_ℓ with rays ±2π/3; right contours sit at
/// apexes 1 ± a_ℓ with the shape selected by `right_angle`. The family
/// satisfies the nesting order (in-contours outermost) with −1 strictly
/// between the two ℓ=2 left contours and +1 strictly between the two ℓ=2
/// right contours.
pub fn build_family(
    m: usize,
    spacings: &[f64],
    right_angle: RightAngle,
    _trunc_tol: f64,
) -> Result<ContourFamily> {
    if m < 2 {
        return Err(Error::Domain(format!("build_family requires m >= 2, got {m}")));
    }
    if spacings.len() != m - 1 {
        return Err(Error::Spacing(format!(
            "expected {} spacings for m = {m}, got {}",
            m - 1,
            spacings.len()
        )));
    }
    let mut prev = 0.0;
    for &a in spacings {
        if !(a > prev && a < 1.0) {
            return Err(Error::Spacing(format!(
                "spacings must satisfy 0 < a_2 < ... < a_m < 1, got {spacings:?}"
            )));
        }
        prev = a;
    }

    let mut left_in = Vec::new();
    let mut left_out = Vec::new();
    let mut right_in = Vec::new();
    let mut right_out = Vec::new();
    for &a in spacings {
        left_in.push(RayContour::wedge(-1.0 - a, 2.0 * PI / 3.0));
        left_out.push(RayContour::wedge(-1.0 + a, 2.0 * PI / 3.0));
        let (rin, rout) = match right_angle {
            RightAngle::FifthPi => (RayContour::bent_right(1.0 + a), RayContour::bent_right(1.0 - a)),
            RightAngle::ThirdPi => (
                RayContour::wedge(1.0 + a, PI / 3.0),
                RayContour::wedge(1.0 - a, PI / 3.0),
            ),
        };
        right_in.push(rin);
        right_out.push(rout);
    }

    // Minimum horizontal gap between adjacent apexes (including the gaps
    // around ∓1 themselves, which equal a_2, and between in/out pairs).
    let mut min_gap = spacings[0]; // distance from ∓1 to the ℓ=2 contours
    for w in spacings.windows(2) {
        min_gap = min_gap.min(w[1] - w[0]);
    }
    min_gap = min_gap.min(2.0 * spacings[0]); // in/out pair at ℓ=2
    // Parallel translates at angle θ are separated by gap·sin(θ).
    let left_factor = (2.0 * PI / 3.0).sin();
    let right_factor = match right_angle {
        RightAngle::FifthPi => (PI / 5.0).sin(),
        RightAngle::ThirdPi => (PI / 3.0).sin(),
    };
    let min_separation = min_gap * left_factor.min(right_factor);

    Ok(ContourFamily {
        left_in,
        left_out,
        right_in,
        right_out,
        spacings: spacings.to_vec(),
        min_separation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn total_weight(nodes: &[(Complex64, Complex64)]) -> Complex64 {
        nodes.iter().map(|&(_, w)| w).sum()
    }

    fn quad<F: Fn(Complex64) -> Complex64>(nodes: &[(Complex64, Complex64)], f: F) -> Complex64 {
        nodes.iter().map(|&(z, w)| w * f(z)).sum()
    }

    #[test]
    fn family_m2_layout() {
        let fam = build_family(2, &[0.5], RightAngle::FifthPi, 1e-10).unwrap();
        assert_eq!(
            fam.left_in.len() + fam.left_out.len() + fam.right_in.len() + fam.right_out.len(),
            4
        );
        // −1 strictly between the two left contours.
        assert!(fam.left_in(2).apex.re < -1.0 && -1.0 < fam.left_out(2).apex.re);
        assert!(fam.right_out(2).apex.re < 1.0 && 1.0 < fam.right_in(2).apex.re);
        assert!(fam.min_separation > 0.0);
    }

    #[test]
    fn family_m3_layout() {
        let fam = build_family(3, &[0.3, 0.6], RightAngle::FifthPi, 1e-10).unwrap();
        // Left family ordered left→right: in_3, in_2, out_2, out_3.
        let xs = [
            fam.left_in(3).apex.re,
            fam.left_in(2).apex.re,
            fam.left_out(2).apex.re,
            fam.left_out(3).apex.re,
        ];
        assert!(xs.windows(2).all(|w| w[0] < w[1]), "{xs:?}");
        assert!(xs[1] < -1.0 && -1.0 < xs[2]);
        // Right family ordered right→left: in_3, in_2, out_2, out_3.
        let vs = [
            fam.right_in(3).apex.re,
            fam.right_in(2).apex.re,
            fam.right_out(2).apex.re,
            fam.right_out(3).apex.re,
        ];
        assert!(vs.windows(2).all(|w| w[0] > w[1]), "{vs:?}");
        assert!(vs.iter().all(|&x| x > 0.0));
        assert_eq!(
            fam.left_in.len() + fam.left_out.len() + fam.right_in.len() + fam.right_out.len(),
            8
        );
    }

    #[test]
    fn bad_spacings_rejected() {
        assert!(matches!(
            build_family(2, &[0.5, 0.4], RightAngle::FifthPi, 1e-10),
            Err(Error::Spacing(_))
        ));
        assert!(matches!(
            build_family(3, &[0.6, 0.4], RightAngle::FifthPi, 1e-10),
            Err(Error::Spacing(_))
        ));
        assert!(matches!(
            build_family(3, &[0.4, 1.2], RightAngle::FifthPi, 1e-10),
            Err(Error::Spacing(_))
        ));
        assert!(matches!(
            build_family(3, &[-0.1, 0.5], RightAngle::FifthPi, 1e-10),
            Err(Error::Spacing(_))
        ));
    }

    #[test]
    fn vertical_segment_weight_is_complex_length() {
        // Both rays vertical: the whole contour is one straight vertical
        // segment; for f ≡ 1 the quadrature total must equal its complex length.
        let mut c = RayContour::wedge(0.3, PI / 2.0);
        c.flat_half_height = 0.7;
        c.truncation_radius = 2.0;
        let nodes = discretize(&c, 4, 8);
        let t = total_weight(&nodes);
        let expected = Complex64::new(0.0, 2.0 * (2.0 + 0.7));
        assert!((t - expected).norm() < 1e-12, "{t}");
    }

    #[test]
    fn gaussian_wedge_integral_is_sqrt_pi_i() {
        // ∫ e^{u²} du over the left wedge {r e^{±i2π/3}} equals √π·i, so
        // dividing by √π·i gives 1.
        let mut c = RayContour::wedge(0.0, 2.0 * PI / 3.0);
        c.truncation_radius = 9.0;
        let nodes = discretize(&c, 7, 16);
        let v = quad(&nodes, |u| (u * u).exp()) / Complex64::new(0.0, PI.sqrt());
        assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-10, "{v}");
    }

    #[test]
    fn scaling_scales_total_weight_linearly() {
        let c = RayContour::bent_right(1.5);
        let k = 0.125; // λ^{-1/3} for λ = 512
        let s = c.scaled(k);
        let t0 = total_weight(&discretize(&c, 4, 8));
        let t1 = total_weight(&discretize(&s, 4, 8));
        assert!((t1 - t0 * k).norm() < 1e-12 * t0.norm());
    }

    #[test]
    fn contour_deformation_invariance() {
        // f = e^{−w³/3} is entire and decays at the ±2π/3 ends, so two
        // admissible left contours must give the same integral.
        let mut c1 = RayContour::wedge(-1.5, 2.0 * PI / 3.0);
        let mut c2 = RayContour::wedge(-1.2, 2.0 * PI / 3.0);
        c1.truncation_radius = 10.0;
        c2.truncation_radius = 10.0;
        let f = |w: Complex64| (-w * w * w / 3.0).exp();
        let v1 = quad(&discretize(&c1, 6, 14), f);
        let v2 = quad(&discretize(&c2, 6, 14), f);
        assert!((v1 - v2).norm() < 1e-9, "{v1} vs {v2}");
    }

    #[test]
    fn doubling_node_density_is_high_order() {
        let mut c = RayContour::wedge(-1.0, 2.0 * PI / 3.0);
        c.truncation_radius = 10.0;
        let f = |w: Complex64| (-w * w * w / 3.0).exp();
        let reference = quad(&discretize(&c, 16, 16), f);
        let coarse = (quad(&discretize(&c, 2, 6), f) - reference).norm();
        let fine = (quad(&discretize(&c, 4, 6), f) - reference).norm();
        assert!(
            coarse >= 100.0 * fine,
            "coarse err {coarse:.3e}, fine err {fine:.3e}"
        );
    }

    #[test]
    fn fit_radius_meets_target() {
        let mut c = RayContour::wedge(-1.5, 2.0 * PI / 3.0);
        // Tracked exponent: Re(−w³/3) (cubic decay along the rays).
        let exps = |w: Complex64| (-w * w * w / 3.0).re;
        fit_radius(&mut c, exps, 1e-8);
        let target = (1e-8f64).ln() - 5.0;
        for (end, ang) in [
            (c.apex, c.upper_angle),
            (c.apex, c.lower_angle),
        ] {
            let far = end + Complex64::from_polar(c.truncation_radius, ang);
            assert!(exps(far) <= target);
        }
    }

    #[test]
    fn nodes_avoid_real_axis_and_are_conjugate_symmetric() {
        for c in [RayContour::bent_right(0.5), RayContour::wedge(-1.3, 2.0 * PI / 3.0)] {
            let nodes = discretize(&c, 4, 8);
            assert!(nodes.iter().all(|(z, _)| z.im != 0.0));
            // For every node there is its conjugate with conjugate-negated weight.
            for &(z, w) in &nodes {
                let found = nodes.iter().any(|&(z2, w2)| {
                    (z2 - z.conj()).norm() < 1e-12 && (w2 + w.conj()).norm() < 1e-12
                });
                assert!(found, "missing conjugate of {z}");
            }
        }
    }

    #[test]
    fn graded_nodes_conjugate_symmetric_and_off_axis() {
        for c in [RayContour::bent_right(0.67), RayContour::wedge(-1.4, 2.0 * PI / 3.0)] {
            let mut c = c;
            c.truncation_radius = 6.0;
            let nodes = discretize_graded(&c, 8, 0.4, 1e-9);
            assert!(nodes.iter().all(|(z, _)| z.im != 0.0));
            for &(z, w) in &nodes {
                let found = nodes.iter().any(|&(z2, w2)| {
                    (z2 - z.conj()).norm() < 1e-12 && (w2 + w.conj()).norm() < 1e-12
                });
                assert!(found, "missing conjugate of {z}");
            }
        }
    }

    #[test]
    fn graded_panels_resolve_nearby_pole() {
        // Integrand with a pole 0.45 right of the apex — the geometry the
        // Cauchy factors create. A fine uniform discretization serves as
        // reference; the graded one must reach its panel tolerance with far
        // fewer nodes than the reference.
        let mut c = RayContour::wedge(-1.45, 2.0 * PI / 3.0);
        c.truncation_radius = 7.0;
        let pole = c.apex + Complex64::new(0.45, 0.0);
        let f = |w: Complex64| (-w * w * w / 3.0).exp() / (w - pole);
        let reference = quad(&discretize(&c, 40, 16), f);
        for (order, tol) in [(12usize, 1e-12f64), (8, 1e-9), (5, 1e-5)] {
            let nodes = discretize_graded(&c, order, 0.45, tol);
            let got = quad(&nodes, f);
            let err = (got - reference).norm() / reference.norm();
            // Allow a modest accumulation factor over the ~dozen panels.
            assert!(err < 50.0 * tol, "order {order}: err {err:.3e} vs tol {tol:.1e}");
            assert!(nodes.len() < 40 * 7, "too many nodes: {}", nodes.len());
        }
    }

    #[test]
    fn graded_node_count_grows_slowly_with_radius() {
        let mut c = RayContour::wedge(-1.5, 2.0 * PI / 3.0);
        c.truncation_radius = 6.0;
        let n6 = discretize_graded(&c, 10, 0.4, 1e-11).len();
        c.truncation_radius = 24.0;
        let n24 = discretize_graded(&c, 10, 0.4, 1e-11).len();
        // Quadrupling the radius should cost far less than 4× the nodes.
        assert!(n24 < 2 * n6, "n6 = {n6}, n24 = {n24}");
    }

    #[test]
    fn distance_to_examples() {
        let c = RayContour::wedge(-1.5, 2.0 * PI / 3.0);
        // The apex itself lies on the contour.
        assert!(c.distance_to(c.apex) < 1e-12);
        // The rays open leftward, so for a point right of the apex the
        // nearest contour point is the apex itself; left of the apex it is
        // the perpendicular foot on a ray, at distance d·sin(π/3).
        let d = c.distance_to(c.apex + Complex64::new(0.5, 0.0));
        assert!((d - 0.5).abs() < 1e-12, "{d}");
        let dl = c.distance_to(c.apex - Complex64::new(0.5, 0.0));
        assert!((dl - 0.5 * (PI / 3.0).sin()).abs() < 1e-12, "{dl}");
        // Far along the ray, well past the truncation radius, still near zero.
        let far = c.apex + Complex64::from_polar(50.0, 2.0 * PI / 3.0);
        assert!(c.distance_to(far) < 1e-9);
        // Bent contour: a point level with the apex, just right of the
        // vertical segment.
        let b = RayContour::bent_right(1.0);
        let d2 = b.distance_to(Complex64::new(1.3, 0.0));
        assert!((d2 - 0.3).abs() < 1e-12, "{d2}");
    }

    #[test]
    fn gauss_legendre_exactness() {
        // Order-n GL integrates polynomials of degree 2n−1 exactly.
        let (xs, ws) = gauss_legendre(6);
        for deg in 0..=11u32 {
            let got: f64 = xs
                .iter()
                .zip(&ws)
                .map(|(x, w)| w * x.powi(deg as i32))
                .sum();
            let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
            assert!((got - exact).abs() < 1e-13, "deg {deg}: {got} vs {exact}");
        }
    }
}
