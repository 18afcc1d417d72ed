//! GUE Tracy–Widom distribution via Nyström discretization of the Airy-kernel
//! Fredholm determinant on L²(s, ∞).
//!
//! Gauss–Legendre nodes on [0, 1) are mapped to [s, ∞) by x = s + A·ξ/(1−ξ).
//! The symmetrized matrix √(w_i w_j)·K(x_i, x_j) has the same determinant as
//! the Nyström operator, and det(I − M) converges spectrally in the node
//! count. The far upper tail 1 − F is computed through tr log(I − M) so that
//! it never suffers the 1 − (1 − ε) rounding loss of the LU route.

use crate::airy::{airy, airy_prime};
use crate::contours::gauss_legendre;

/// Airy kernel K(x, y) = (Ai(x)Ai′(y) − Ai′(x)Ai(y))/(x − y), with the
/// diagonal limit Ai′(x)² − x·Ai(x)².
fn airy_kernel(x: f64, y: f64, ai_x: f64, aip_x: f64, ai_y: f64, aip_y: f64) -> f64 {
    if (x - y).abs() < 1e-7 {
        let m = 0.5 * (x + y);
        // Evaluate the diagonal form at the midpoint; K is smooth.
        let (a, ap) = if x == y { (ai_x, aip_x) } else { (airy(m), airy_prime(m)) };
        ap * ap - m * a * a
    } else {
        (ai_x * aip_y - aip_x * ai_y) / (x - y)
    }
}

/// Symmetrized Nyström matrix of the Airy kernel on (s, ∞) with n mapped
/// Gauss–Legendre nodes.
fn nystrom_matrix(s: f64, n: usize) -> Vec<Vec<f64>> {
    let (xs, ws) = gauss_legendre(n);
    let scale = 4.0;
    let mut nodes = Vec::with_capacity(n);
    let mut sqw = Vec::with_capacity(n);
    for (x, w) in xs.iter().zip(&ws) {
        // Map [−1, 1] → [0, 1), then ξ → s + scale·ξ/(1−ξ).
        let xi = 0.5 * (x + 1.0);
        let node = s + scale * xi / (1.0 - xi);
        let jac = scale / ((1.0 - xi) * (1.0 - xi)) * 0.5;
        nodes.push(node);
        sqw.push((w * jac).sqrt());
    }
    let ai: Vec<f64> = nodes.iter().map(|&x| airy(x)).collect();
    let aip: Vec<f64> = nodes.iter().map(|&x| airy_prime(x)).collect();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            m[i][j] = sqw[i]
                * sqw[j]
                * airy_kernel(nodes[i], nodes[j], ai[i], aip[i], ai[j], aip[j]);
        }
    }
    m
}

/// Determinant of I − M by LU with partial pivoting.
fn det_i_minus(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| (i == j) as u8 as f64 - m[i][j]).collect())
        .collect();
    let mut det = 1.0;
    for k in 0..n {
        let piv = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        if piv != k {
            a.swap(piv, k);
            det = -det;
        }
        let akk = a[k][k];
        if akk == 0.0 {
            return 0.0;
        }
        det *= akk;
        for i in (k + 1)..n {
            let f = a[i][k] / akk;
            for j in (k + 1)..n {
                a[i][j] -= f * a[k][j];
            }
        }
    }
    det
}

/// tr log route: Σ_k tr(Mᵏ)/k, accurate when the spectral radius is small.
fn trace_log_sum(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut power: Vec<Vec<f64>> = m.to_vec();
    let mut total = 0.0;
    for k in 1..=40 {
        let tr: f64 = (0..n).map(|i| power[i][i]).sum();
        let term = tr / k as f64;
        total += term;
        if term.abs() < 1e-300 || term.abs() < 1e-18 * total.abs() {
            break;
        }
        // power ← power · m
        let mut next = vec![vec![0.0; n]; n];
        for i in 0..n {
            for l in 0..n {
                let p = power[i][l];
                if p == 0.0 {
                    continue;
                }
                for j in 0..n {
                    next[i][j] += p * m[l][j];
                }
            }
        }
        power = next;
    }
    total
}

pub const FGUE_DEFAULT_NODES: usize = 80;

/// F_GUE(s) = det(I − K_Airy) on L²(s, ∞) with the default node count.
pub fn fgue_cdf(s: f64) -> f64 {
    fgue_cdf_n(s, FGUE_DEFAULT_NODES)
}

pub fn fgue_cdf_n(s: f64, n: usize) -> f64 {
    det_i_minus(&nystrom_matrix(s, n))
}

/// Upper tail 1 − F_GUE(s) without subtractive cancellation:
/// 1 − det(I − M) = −expm1(−Σ tr(Mᵏ)/k).
pub fn fgue_upper_tail(s: f64) -> f64 {
    let m = nystrom_matrix(s, FGUE_DEFAULT_NODES);
    -(-trace_log_sum(&m)).exp_m1()
}

/// Natural log of the upper tail, usable deep into the tail where 1 − F
/// underflows relative precision.
pub fn fgue_log_upper_tail(s: f64) -> f64 {
    let m = nystrom_matrix(s, FGUE_DEFAULT_NODES);
    let delta = trace_log_sum(&m);
    // ln(1 − e^{−δ}); for small δ this is ln δ + ln(1 − δ/2 + …).
    (-(-delta).exp_m1()).ln()
}

/// Internal error estimate: node-doubling difference.
pub fn fgue_err_estimate(s: f64) -> f64 {
    (fgue_cdf_n(s, FGUE_DEFAULT_NODES) - fgue_cdf_n(s, FGUE_DEFAULT_NODES * 2)).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    // Reference values computed offline with an independent high-order
    // quadrature discretization of the same determinant (converged to ~1e-12
    // under node and mapping changes; F(0) matches the published value
    // 0.9693728283552627 of the GUE Tracy–Widom law).
    const FGUE_TABLE: &[(f64, f64)] = &[
        (-4.0, 0.0035445535955086),
        (-3.0, 0.0803195529393335),
        (-2.0, 0.4132241425051224),
        (-1.0, 0.8072142419992868),
        (0.0, 0.9693728283552638),
        (1.0, 0.9975054381493895),
        (2.0, 0.9998875536983102),
        (3.0, 0.9999970059566079),
    ];

    #[test]
    fn matches_reference_values() {
        for &(s, f) in FGUE_TABLE {
            let got = fgue_cdf(s);
            assert!((got - f).abs() < 1e-8, "F({s}): {got} vs {f}");
        }
    }

    #[test]
    fn doubling_estimate_small() {
        for s in [-6.0, -3.0, 0.0, 2.0] {
            assert!(fgue_err_estimate(s) < 1e-9, "s = {s}");
        }
    }

    #[test]
    fn tends_to_one() {
        assert!(1.0 - fgue_cdf(8.0) <= 1e-12);
        assert!(fgue_upper_tail(8.0) <= 1e-12);
        assert!(fgue_upper_tail(8.0) > 0.0);
    }

    #[test]
    fn upper_tail_routes_agree_in_overlap() {
        // LU route vs trace-log route where both are well conditioned.
        for s in [-1.0, 0.0, 1.0, 2.0, 3.0] {
            let lu = 1.0 - fgue_cdf(s);
            let tl = fgue_upper_tail(s);
            // The LU route carries an eps-level absolute error from forming
            // 1 − det; allow for it on top of the relative band.
            assert!(
                (lu - tl).abs() <= 1e-10 * lu + 1e-14,
                "s = {s}: {lu} vs {tl}"
            );
        }
    }

    #[test]
    fn far_tail_asymptotic_ratio() {
        // 1 − F(L) ~ e^{−(4/3)L^{3/2}}/(16π L^{3/2}).
        for ell in [4.0f64, 6.0, 8.0] {
            let log_tail = fgue_log_upper_tail(ell);
            let log_asym = -(4.0 / 3.0) * ell.powf(1.5) - (16.0 * PI * ell.powf(1.5)).ln();
            let ratio = (log_tail - log_asym).exp();
            assert!(
                (ratio - 1.0).abs() <= 5.0 * ell.powf(-1.5),
                "L = {ell}: ratio {ratio}"
            );
        }
    }
}
