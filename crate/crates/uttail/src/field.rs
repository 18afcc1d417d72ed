//! Field-level joint tail probabilities built on the multipoint series.
//!
//! The limiting field is pinned at the origin: its value there is a standard
//! rate-2 exponential excess, independent of the increment field obtained by
//! subtracting the origin value. This module exposes the joint tails of the
//! pinned field (`hat_t`), the joint tails of the increment field
//! (`h0_joint_tail`), the factorized joint density at the origin
//! (`joint_density_q1q2`), and two small probabilistic oracles used to
//! cross-check the spatial Brownian marginal.

use statrs::function::erf::erfc;

use crate::contours::gauss_legendre;
use crate::error::{Error, Result};
use crate::kernels::OrderedConfig;
use crate::tfunc::{t_beta_derivative, t_general, EvalParams, Evaluation};

/// A joint tail query: threshold `betas[i]` at space-time point `points[i]`.
/// Points may be given in any order; evaluation sorts them. Duplicate points
/// are rejected.
#[derive(Clone, Debug)]
pub struct FieldQuery {
    pub points: Vec<(f64, f64)>,
    pub betas: Vec<f64>,
}

impl FieldQuery {
    pub fn new(points: Vec<(f64, f64)>, betas: Vec<f64>) -> Result<FieldQuery> {
        if points.len() != betas.len() {
            return Err(Error::Dimension(format!(
                "{} points but {} thresholds",
                points.len(),
                betas.len()
            )));
        }
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                if points[i] == points[j] {
                    return Err(Error::DuplicatePoint(i, j));
                }
            }
        }
        Ok(FieldQuery { points, betas })
    }

    pub fn m(&self) -> usize {
        self.points.len()
    }
}

/// Joint upper-tail probability of the pinned field at the query points.
///
/// If (0,0) is among the points its threshold is clamped to max{β, 0} (the
/// origin value is nonnegative, so thresholds below zero are inactive);
/// otherwise (0,0) joins the configuration with threshold 0, which does not
/// change the probability. The result is a plain multipoint series value on
/// the sorted configuration.
pub fn hat_t(query: &FieldQuery, params: &EvalParams) -> Result<Evaluation> {
    let mut points = query.points.clone();
    let mut betas = query.betas.clone();
    match points.iter().position(|&p| p == (0.0, 0.0)) {
        Some(i) => betas[i] = betas[i].max(0.0),
        None => {
            points.push((0.0, 0.0));
            betas.push(0.0);
        }
    }
    let config = OrderedConfig::new(points, betas)?;
    t_general(&config, params)
}

/// Joint upper tail of the increment field (field value minus origin value)
/// at the query points.
///
/// Equals −(1/2) ∂/∂β̂ at β̂ = 0 of the joint tail with (0,0) adjoined at
/// threshold β̂; the derivative is analytic. Queries containing (0,0) are
/// rejected — the increment there is identically zero.
pub fn h0_joint_tail(query: &FieldQuery, params: &EvalParams) -> Result<Evaluation> {
    let (config, k) = adjoin_origin(query, &query.betas)?;
    let mut ev = t_beta_derivative(&config, k, params)?;
    ev.value *= -0.5;
    ev.abs_err_estimate *= 0.5;
    ev.truncation_bound *= 0.5;
    Ok(ev)
}

/// Sort the query points together with (0,0) at threshold 0 and report the
/// 1-based position the origin lands at. A query already containing (0,0)
/// fails with the duplicate-point error.
fn adjoin_origin(query: &FieldQuery, betas: &[f64]) -> Result<(OrderedConfig, usize)> {
    let mut points = query.points.clone();
    let mut bts = betas.to_vec();
    points.push((0.0, 0.0));
    bts.push(0.0);
    let config = OrderedConfig::new(points, bts)?;
    let k = 1 + config
        .points
        .iter()
        .position(|&p| p == (0.0, 0.0))
        .expect("origin was just inserted");
    Ok((config, k))
}

/// Step for the finite-difference directions of the mixed density
/// derivative.
const DENSITY_FD_STEP: f64 = 1e-3;

/// The factorized joint density of (origin value, field at the query
/// points): `q2` is the origin density 2e^{−2β₀} for β₀ > 0 and 0 for
/// β₀ < 0; `q1` is the joint density of the increment field at the query
/// thresholds, independent of β₀. The origin density has a kink at β₀ = 0,
/// where no value is defined.
///
/// `q1` is the (m+1)-fold mixed threshold derivative of the adjoined-origin
/// tail, with the origin direction taken analytically and the m query
/// directions by central differences of step 1e-3.
pub fn joint_density_q1q2(
    query: &FieldQuery,
    beta0: f64,
    params: &EvalParams,
) -> Result<(f64, f64)> {
    if beta0 == 0.0 {
        return Err(Error::Domain(
            "origin density is undefined at beta0 = 0 (kink between 0 and 2)".into(),
        ));
    }
    let q2 = if beta0 > 0.0 {
        2.0 * (-2.0 * beta0).exp()
    } else {
        0.0
    };

    let m = query.m();
    let h = DENSITY_FD_STEP;
    let mut mixed = 0.0;
    for corner in 0..(1u32 << m) {
        let mut betas = query.betas.clone();
        let mut sign = 1.0;
        for (j, b) in betas.iter_mut().enumerate() {
            if corner >> j & 1 == 1 {
                *b += h;
            } else {
                *b -= h;
                sign = -sign;
            }
        }
        let (config, k) = adjoin_origin(query, &betas)?;
        let ev = t_beta_derivative(&config, k, params)?;
        mixed += sign * ev.value;
    }
    mixed /= (2.0 * h).powi(m as i32);
    // density = (1/2)(−1)^{m+1} × mixed derivative
    let q1 = 0.5 * if m % 2 == 0 { -mixed } else { mixed };
    Ok((q1, q2))
}

/// Standard normal upper tail P(Z ≥ x).
pub fn gaussian_tail(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Both sides of the reflection identity satisfied by an independent sum of
/// a rate-2 exponential and a drifted Gaussian: with X ~ Exp(2), Z ~ N(0,1)
/// and S = X + √(2α)Z − 2α,
///
///   P(S ≥ β) = e^{−2β} P(S ≥ −β).
///
/// Each side integrates the convolution independently, so comparing the
/// returned pair checks the identity rather than restating it.
pub fn verify_exp_gauss_identity(alpha: f64, beta: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let lhs = exp_gauss_tail(alpha, beta);
    let rhs = (-2.0 * beta).exp() * exp_gauss_tail(alpha, -beta);
    Ok((lhs, rhs))
}

/// P(X + √(2α)Z − 2α ≥ β) by composite Gauss–Legendre quadrature over the
/// exponential variable: ∫₀^∞ 2e^{−2x} P(Z ≥ (β + 2α − x)/√(2α)) dx.
fn exp_gauss_tail(alpha: f64, beta: f64) -> f64 {
    let sd = (2.0 * alpha).sqrt();
    let (xs, ws) = gauss_legendre(24);
    // The exponential weight is below 1e-19 past x = 22.
    let (cut, width) = (22.0, 0.5);
    let mut total = 0.0;
    let mut a = 0.0;
    while a < cut {
        let half = 0.5 * width;
        let mid = a + half;
        for (x, w) in xs.iter().zip(&ws) {
            let t = mid + half * x;
            let z = (beta + 2.0 * alpha - t) / sd;
            total += w * half * 2.0 * (-2.0 * t).exp() * gaussian_tail(z);
        }
        a += width;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(points: Vec<(f64, f64)>, betas: Vec<f64>) -> FieldQuery {
        FieldQuery::new(points, betas).unwrap()
    }

    fn quick(panel_order: usize, target_tol: f64) -> EvalParams {
        EvalParams {
            panel_order,
            target_tol,
            ..EvalParams::default()
        }
    }

    #[test]
    fn origin_marginal_is_clamped_exponential() {
        for beta in [-1.0, 0.0, 0.5, 2.0] {
            let ev = hat_t(&q(vec![(0.0, 0.0)], vec![beta]), &EvalParams::default()).unwrap();
            let want = (-2.0 * beta.max(0.0)).exp();
            assert!((ev.value - want).abs() <= 1e-14, "beta={beta}: {}", ev.value);
        }
    }

    #[test]
    fn shuffled_query_is_bit_exact() {
        let params = quick(3, 0.25);
        let a = hat_t(
            &q(
                vec![(0.5, 1.0), (0.0, 0.0), (-0.3, 0.4)],
                vec![0.8, -0.2, 0.3],
            ),
            &params,
        )
        .unwrap();
        let b = hat_t(
            &q(
                vec![(-0.3, 0.4), (0.5, 1.0), (0.0, 0.0)],
                vec![0.3, 0.8, -0.2],
            ),
            &params,
        )
        .unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert!(a.value > 0.0 && a.value < 1.0);
    }

    #[test]
    fn negative_origin_threshold_is_inactive() {
        let params = quick(4, 1e-2);
        let pts = vec![(0.0, 0.0), (0.4, 0.9)];
        let lo = hat_t(&q(pts.clone(), vec![-0.7, 0.5]), &params).unwrap();
        let zero = hat_t(&q(pts.clone(), vec![0.0, 0.5]), &params).unwrap();
        let hi = hat_t(&q(pts, vec![0.4, 0.5]), &params).unwrap();
        assert_eq!(lo.value.to_bits(), zero.value.to_bits());
        assert!(hi.value < zero.value);
    }

    #[test]
    fn increment_tail_matches_brownian_marginal_on_space_axis() {
        // At zero time gap the increment is a two-sided Brownian motion with
        // drift, so the one-point tail has a Gaussian closed form.
        let params = EvalParams::default();
        let half = h0_joint_tail(&q(vec![(0.5, 0.0)], vec![-1.0]), &params).unwrap();
        assert!(
            (half.value - 0.5).abs() <= 1e-5,
            "P(Z >= 0) case: {} (err est {:.1e})",
            half.value,
            half.abs_err_estimate
        );
        for (alpha, beta) in [(0.25f64, 0.4), (1.0, -0.6), (-0.5, -1.0)] {
            let ev = h0_joint_tail(&q(vec![(alpha, 0.0)], vec![beta]), &params).unwrap();
            let a = alpha.abs();
            let want = gaussian_tail((beta + 2.0 * a) / (2.0 * a).sqrt());
            assert!(
                (ev.value - want).abs() <= 1e-5,
                "alpha={alpha} beta={beta}: got {} want {want}",
                ev.value
            );
        }
    }

    #[test]
    fn increment_tail_saturates_deep_on_time_axis() {
        let ev = h0_joint_tail(&q(vec![(0.0, 1.0)], vec![-30.0]), &EvalParams::default()).unwrap();
        assert!((ev.value - 1.0).abs() <= 1e-6, "got {}", ev.value);
    }

    #[test]
    fn increment_tail_rejects_origin_point() {
        let err = h0_joint_tail(&q(vec![(0.0, 0.0)], vec![0.3]), &EvalParams::default());
        assert!(matches!(err, Err(Error::DuplicatePoint(_, _))));
        let err = h0_joint_tail(
            &q(vec![(0.2, 0.5), (0.0, 0.0)], vec![0.3, 0.1]),
            &EvalParams::default(),
        );
        assert!(matches!(err, Err(Error::DuplicatePoint(_, _))));
    }

    #[test]
    fn origin_density_examples() {
        let query = q(vec![(0.3, 0.8)], vec![0.2]);
        let params = quick(6, 1e-4);
        let (_, q2) = joint_density_q1q2(&query, 0.5, &params).unwrap();
        assert!((q2 - 2.0 * (-1.0f64).exp()).abs() <= 1e-15);
        let (_, q2neg) = joint_density_q1q2(&query, -0.8, &params).unwrap();
        assert_eq!(q2neg, 0.0);
        assert!(matches!(
            joint_density_q1q2(&query, 0.0, &params),
            Err(Error::Domain(_))
        ));

        // the origin density integrates to one
        let (xs, ws) = gauss_legendre(24);
        let mut total = 0.0;
        for p in 0..40 {
            let (a, b) = (p as f64 * 0.5, p as f64 * 0.5 + 0.5);
            for (x, w) in xs.iter().zip(&ws) {
                let t = 0.5 * (a + b) + 0.5 * (b - a) * x;
                total += 0.25 * w * 2.0 * (-2.0 * t).exp();
            }
        }
        assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn joint_density_factorizes_independently_of_origin_threshold() {
        // Second difference of the two-point tail over (origin threshold,
        // query threshold), divided by the origin density; the ratio must not
        // depend on the origin threshold and must match the analytic-hybrid
        // increment density.
        let (alpha, tau, delta) = (0.3, 0.8, 0.2);
        let params = EvalParams {
            n_max: 4,
            target_tol: 1e-3,
            ..EvalParams::default()
        };
        let g = 0.05;
        let mut ratios = Vec::new();
        for beta0 in [0.3, 0.7, 1.5] {
            let mut dd = 0.0;
            for (s0, s1) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let ev = hat_t(
                    &q(
                        vec![(0.0, 0.0), (alpha, tau)],
                        vec![beta0 + s0 * g, beta0 + delta + s1 * g],
                    ),
                    &params,
                )
                .unwrap();
                dd += s0 * s1 * ev.value;
            }
            let density = dd / (4.0 * g * g);
            let q2 = 2.0 * (-2.0 * beta0).exp();
            ratios.push(density / q2);
        }
        for w in ratios.windows(2) {
            assert!(
                (w[0] - w[1]).abs() <= 1e-3 * w[0].abs(),
                "ratios vary with origin threshold: {ratios:?}"
            );
        }

        let (q1, _) =
            joint_density_q1q2(&q(vec![(alpha, tau)], vec![delta]), 0.7, &params).unwrap();
        assert!(q1 > 0.0);
        assert!(
            (ratios[0] / q1 - 1.0).abs() <= 1e-2,
            "hybrid density {q1} vs difference ratio {}",
            ratios[0]
        );
    }

    #[test]
    fn reflection_identity_holds_at_field_level() {
        let params = EvalParams {
            n_max: 4,
            target_tol: 1e-4,
            ..EvalParams::default()
        };
        for (alpha, tau, beta) in [(0.4, 0.9, 0.35), (-0.3, 0.5, -0.2)] {
            let lhs = hat_t(&q(vec![(alpha, tau)], vec![beta]), &params).unwrap();
            let rhs = hat_t(&q(vec![(-alpha, -tau)], vec![-beta]), &params).unwrap();
            let factor = (2.0 / 3.0 * tau - 2.0 * beta).exp();
            let rel = (lhs.value - factor * rhs.value).abs() / lhs.value.abs();
            assert!(
                rel <= 1e-6,
                "(alpha,tau,beta)=({alpha},{tau},{beta}): rel {rel:.2e}"
            );
        }
    }

    #[test]
    fn far_thresholds_reduce_to_smaller_queries() {
        let params = quick(3, 0.25);
        let pts = vec![(0.1, 0.4), (0.5, 1.2)];
        let hi = hat_t(&q(pts.clone(), vec![0.2, 30.0]), &params).unwrap();
        assert!(hi.value.abs() <= 1e-12, "got {}", hi.value);

        let lo = hat_t(&q(pts, vec![0.2, -30.0]), &params).unwrap();
        let one = hat_t(&q(vec![(0.1, 0.4)], vec![0.2]), &params).unwrap();
        assert!(
            (lo.value - one.value).abs() <= 1e-6 * one.value.abs(),
            "reduced {} vs direct {}",
            lo.value,
            one.value
        );
    }

    #[test]
    fn tail_values_lie_in_unit_interval_and_decrease() {
        let params = EvalParams {
            n_max: 4,
            panel_order: 6,
            target_tol: 1e-2,
            ..EvalParams::default()
        };
        let mut last = f64::INFINITY;
        for beta in [-1.0, 0.0, 0.8] {
            let ev = hat_t(&q(vec![(0.3, 0.7)], vec![beta]), &params).unwrap();
            let slack = 2.0 * ev.abs_err_estimate;
            assert!(ev.value >= -slack && ev.value <= 1.0 + slack, "{}", ev.value);
            assert!(ev.value <= last + slack);
            last = ev.value;
        }
    }

    #[test]
    fn gaussian_tail_basics() {
        assert!((gaussian_tail(0.0) - 0.5).abs() <= 1e-15);
        for x in [0.3, 1.7, 4.0] {
            assert!((gaussian_tail(-x) - (1.0 - gaussian_tail(x))).abs() <= 1e-14);
        }
        let x = 8.0f64;
        let mills = (-0.5 * x * x).exp() / ((2.0 * std::f64::consts::PI).sqrt() * x);
        assert!((gaussian_tail(x) / mills - 1.0).abs() <= 2e-2);
    }

    #[test]
    fn exp_gauss_identity_checks() {
        let (l, r) = verify_exp_gauss_identity(0.5, 0.0).unwrap();
        assert_eq!(l.to_bits(), r.to_bits());
        for (alpha, beta) in [(1.0, 0.7), (0.25, -1.2)] {
            let (lhs, rhs) = verify_exp_gauss_identity(alpha, beta).unwrap();
            assert!(
                (lhs - rhs).abs() <= 1e-8,
                "alpha={alpha} beta={beta}: {lhs} vs {rhs}"
            );
        }
        assert!(verify_exp_gauss_identity(0.0, 0.3).is_err());
    }

    #[test]
    fn query_validation() {
        assert!(matches!(
            FieldQuery::new(vec![(0.0, 1.0)], vec![]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            FieldQuery::new(vec![(0.2, 0.3), (0.2, 0.3)], vec![0.0, 0.0]),
            Err(Error::DuplicatePoint(0, 1))
        ));
    }
}
