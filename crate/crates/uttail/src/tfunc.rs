//! The multipoint upper-tail series T and its β-derivatives.
//!
//! T(β; x) is an alternating sum over occupation vectors n = (1, n₂, …, n_m)
//! of contour-integral terms: each term couples 2n_ℓ variables per level ℓ
//! (one set U_ℓ on the left contour family, one set V_ℓ on the right) through
//! a chain of Cauchy determinants, exponential factors built from parameter
//! gaps, and coefficients collected from auxiliary circle integrals. This
//! module evaluates the series by graded tensor-product quadrature, certifies
//! the truncation remainder per call, and provides the cancellation-safe
//! two-point decomposition and closed-form tail asymptote needed to resolve
//! far-tail differences.

use std::collections::BTreeMap;
use std::f64::consts::{LN_2, PI};
use std::sync::Arc;

use num_complex::Complex64;
use statrs::function::erf::erfc;

use crate::contours::{
    build_family, default_spacings, discretize_graded, fit_radius, ContourFamily, RayContour,
    RightAngle,
};
use crate::error::{Error, Result};
use crate::kernels::{cauchy_det_direct, ExpFactorParams, OrderedConfig};
use crate::numerics::{deterministic_sum, CompensatedSum, LogComplex};

/// Largest occupation number a single level may carry; chain scratch buffers
/// and the certificate assume this bound.
pub const MAX_OCCUPANCY: usize = 6;

/// Accuracy ladder: Gauss–Legendre panel order paired with the per-panel
/// tolerance that sets the grading of panel sizes. Rung 0 is the finest; the
/// series driver picks the cheapest rung that still meets each term's share
/// of the error budget.
const LADDER: [(usize, f64); 9] = [
    (12, 1e-13),
    (10, 1e-11),
    (8, 1e-9),
    (6, 1e-7),
    (5, 1e-5),
    (4, 1e-3),
    (3, 1e-2),
    (3, 1e-1),
    (3, 3e-1),
];

/// Rough panel count per contour, used to convert a per-panel tolerance into
/// a whole-term quadrature error estimate.
pub(crate) const PANEL_FUDGE: f64 = 30.0;

/// Node-tuple budget for the certificate's ratio measurements; kept modest
/// so the certificate never dominates the cost of an evaluation.
pub(crate) const CERT_BUDGET: f64 = 2e6;

/// Coarsest panel tolerance trusted for ratio measurements; the bottom
/// ladder rungs are accurate enough for small correction terms but not for
/// certifying decay.
pub(crate) const CERT_PTOL_MAX: f64 = 1e-2;

/// Safety factor applied to the measured per-level decay constant before it
/// is used to bound unseen terms.
pub(crate) const RHO_SAFETY: f64 = 4.0;

/// A level with threshold gap below this (and below [`REDUCTION_Z`] in local
/// fluctuation units) is dropped as implied by its predecessor.
const REDUCTION_BETA_GAP: f64 = -10.0;
const REDUCTION_Z: f64 = -8.0;

/// Evaluation controls shared by every series evaluator.
#[derive(Clone, Debug)]
pub struct EvalParams {
    /// Cap on each occupation number n_ℓ.
    pub n_max: usize,
    /// Radius of the auxiliary circles (must exceed 1).
    pub z_radius: f64,
    /// Trapezoid points per circle.
    pub z_nodes: usize,
    /// Highest Gauss–Legendre panel order the evaluator may use.
    pub panel_order: usize,
    /// Contours are truncated where the exponential factor has decayed below
    /// this fraction of its peak along the contour.
    pub trunc_tol: f64,
    /// Relative accuracy goal for the series, measured against the magnitude
    /// of the leading (all-ones) term.
    pub target_tol: f64,
    /// A single term may not exceed this many node tuples.
    pub max_tuples: f64,
    /// Multiplies every fitted truncation radius; for robustness sweeps.
    pub radius_scale: f64,
    /// Contour spacings a₂ < … < a_m in (0, 1); `None` picks the even
    /// defaults (ℓ−1)/m.
    pub spacings: Option<Vec<f64>>,
    /// Evaluate the slower symmetric form in which every circle variable is
    /// integrated explicitly (the first circle as well); for cross-checks.
    pub validate_def22: bool,
    /// Sum over full node sets instead of folding conjugate symmetry; the
    /// imaginary residue then becomes a meaningful diagnostic.
    pub full_nodes: bool,
    /// Seed consumed by Monte Carlo helpers that accept these parameters;
    /// deterministic evaluators ignore it.
    pub seed: u64,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            n_max: 2,
            z_radius: 2.0,
            z_nodes: 64,
            panel_order: 12,
            trunc_tol: 1e-12,
            target_tol: 1e-6,
            max_tuples: 1e8,
            radius_scale: 1.0,
            spacings: None,
            validate_def22: false,
            full_nodes: false,
            seed: 0,
        }
    }
}

/// Validate parameters and return the accuracy ladder capped at the
/// requested panel order.
pub(crate) fn validated_ladder(params: &EvalParams, m: usize) -> Result<Vec<(usize, f64)>> {
    if params.n_max == 0 || params.n_max > MAX_OCCUPANCY {
        return Err(Error::Order(format!(
            "n_max must lie in 1..={MAX_OCCUPANCY}, got {}",
            params.n_max
        )));
    }
    if !(params.z_radius > 1.0) {
        return Err(Error::Domain(format!(
            "z_radius must exceed 1, got {}",
            params.z_radius
        )));
    }
    if params.z_nodes < 8 {
        return Err(Error::Domain(format!(
            "z_nodes must be at least 8, got {}",
            params.z_nodes
        )));
    }
    let ladder: Vec<(usize, f64)> = LADDER
        .iter()
        .copied()
        .filter(|&(po, _)| po <= params.panel_order)
        .collect();
    if ladder.is_empty() {
        return Err(Error::Order(format!(
            "panel_order must be at least 3, got {}",
            params.panel_order
        )));
    }
    if !(params.trunc_tol > 0.0 && params.trunc_tol <= 1e-2) {
        return Err(Error::Domain(format!(
            "trunc_tol must lie in (0, 1e-2], got {}",
            params.trunc_tol
        )));
    }
    if !(params.target_tol > 0.0) {
        return Err(Error::Domain(format!(
            "target_tol must be positive, got {}",
            params.target_tol
        )));
    }
    if !(params.max_tuples >= 1e3) {
        return Err(Error::Domain(format!(
            "max_tuples must be at least 1e3, got {}",
            params.max_tuples
        )));
    }
    if !(0.25..=4.0).contains(&params.radius_scale) {
        return Err(Error::Domain(format!(
            "radius_scale must lie in [0.25, 4], got {}",
            params.radius_scale
        )));
    }
    if let Some(sp) = &params.spacings {
        if sp.len() != m.saturating_sub(1) {
            return Err(Error::Spacing(format!(
                "expected {} spacings for m = {m}, got {}",
                m - 1,
                sp.len()
            )));
        }
    }
    Ok(ladder)
}

/// Result of a series evaluation: the value plus the error bookkeeping.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    /// Estimated absolute error: quadrature share plus truncation bound plus
    /// any reduction estimates.
    pub abs_err_estimate: f64,
    /// Number of series terms actually summed.
    pub terms_used: usize,
    /// Certified absolute bound on the dropped part of the series.
    pub truncation_bound: f64,
    pub diagnostics: BTreeMap<String, f64>,
}

impl Evaluation {
    pub(crate) fn exact(value: f64) -> Evaluation {
        Evaluation {
            value,
            abs_err_estimate: value.abs() * 1e-15,
            terms_used: 1,
            truncation_bound: 0.0,
            diagnostics: BTreeMap::new(),
        }
    }
}

/// One-point value: T = exp((2/3)τ − 2β). Space-independent; the spatial
/// argument is kept for signature symmetry.
pub fn t_m1(beta: f64, alpha: f64, tau: f64) -> f64 {
    let _ = alpha;
    (2.0 / 3.0 * tau - 2.0 * beta).exp()
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Mode {
    Plain,
    /// Differentiate in the k-th threshold (1-based) by inserting the
    /// per-tuple linear statistic into the integrand.
    BetaDeriv(usize),
}

// ---------------------------------------------------------------------------
// geometry: contours, radii, discretized node lists per ladder rung
// ---------------------------------------------------------------------------

/// A quadrature node dressed with its share of the integrand: the contour
/// weight, 1/(2πi), and the exponential factor of its level and side (scaled
/// so that the largest amplitude on each (level, side) has magnitude one).
#[derive(Clone, Copy, Debug)]
pub(crate) struct EngineNode {
    pub w: Complex64,
    pub amp: Complex64,
    pub is_in: bool,
}

pub(crate) struct LevelLists {
    /// Per level (index ℓ−2) and side (0 = left/U, 1 = right/V): in-contour
    /// nodes followed by out-contour nodes.
    pub(crate) combined: Vec<[Arc<Vec<EngineNode>>; 2]>,
    /// The out-contour tails of `combined`, sharing its amplitude scale.
    pub(crate) out_only: Vec<[Arc<Vec<EngineNode>>; 2]>,
    /// Log-magnitude scales divided out of the amplitudes.
    pub(crate) scales: Vec<[f64; 2]>,
}

pub(crate) struct Geometry {
    m: usize,
    factors: Vec<ExpFactorParams>,
    /// log of the absolute-parameter factor exp((2/3)τ₁ − 2β₁); everything
    /// else depends only on parameter gaps.
    f1_log: f64,
    pub(crate) family: ContourFamily,
    /// Truncation radii per level (index ℓ−2), side, and tag (0 = in, 1 = out).
    radii: Vec<[[f64; 2]; 2]>,
    ladder: Vec<(usize, f64)>,
    pub(crate) sets: Vec<Option<LevelLists>>,
}

fn family_contour(family: &ContourFamily, ell: usize, side: usize, tag: usize) -> &RayContour {
    match (side, tag) {
        (0, 0) => family.left_in(ell),
        (0, 1) => family.left_out(ell),
        (1, 0) => family.right_in(ell),
        _ => family.right_out(ell),
    }
}

impl Geometry {
    pub(crate) fn build(
        config: &OrderedConfig,
        params: &EvalParams,
        ladder: Vec<(usize, f64)>,
        family_override: Option<ContourFamily>,
    ) -> Result<Geometry> {
        let m = config.m();
        let factors = config.factors();
        let f1_log = -2.0 * (factors[0].cubic + factors[0].lin);
        let family = match family_override {
            Some(f) => f,
            None => {
                let sp = params
                    .spacings
                    .clone()
                    .unwrap_or_else(|| default_spacings(m));
                build_family(m, &sp, RightAngle::FifthPi, params.trunc_tol)?
            }
        };
        let mut radii = Vec::with_capacity(m - 1);
        for ell in 2..=m {
            let f = factors[ell - 1];
            let mut per = [[0.0; 2]; 2];
            for (side, sgn) in [(0usize, 1.0f64), (1, -1.0)] {
                for tag in 0..2 {
                    let mut c = family_contour(&family, ell, side, tag).clone();
                    fit_radius(&mut c, |w| sgn * f.re_exponent(w), params.trunc_tol);
                    per[side][tag] = (c.truncation_radius * 2.0 * params.radius_scale).min(120.0);
                }
            }
            radii.push(per);
        }
        let sets = (0..ladder.len()).map(|_| None).collect();
        Ok(Geometry {
            m,
            factors,
            f1_log,
            family,
            radii,
            ladder,
            sets,
        })
    }

    pub(crate) fn ensure_lists(&mut self, pi: usize) {
        if self.sets[pi].is_some() {
            return;
        }
        let (order, ptol) = self.ladder[pi];
        let sep = self.family.min_separation;
        let two_pi_i = Complex64::new(0.0, 2.0 * PI);
        let mut combined = Vec::with_capacity(self.m - 1);
        let mut out_only = Vec::with_capacity(self.m - 1);
        let mut scales = Vec::with_capacity(self.m - 1);
        for ell in 2..=self.m {
            let f = self.factors[ell - 1];
            let mut lists: [Arc<Vec<EngineNode>>; 2] =
                [Arc::new(Vec::new()), Arc::new(Vec::new())];
            let mut outs: [Arc<Vec<EngineNode>>; 2] = [Arc::new(Vec::new()), Arc::new(Vec::new())];
            let mut sc = [0.0f64; 2];
            for (side, sgn) in [(0usize, 1.0f64), (1, -1.0)] {
                let mut raw: Vec<(Complex64, Complex64, bool)> = Vec::new();
                let mut in_len = 0;
                for tag in 0..2 {
                    let mut c = family_contour(&self.family, ell, side, tag).clone();
                    c.truncation_radius = self.radii[ell - 2][side][tag];
                    for (w, wt) in discretize_graded(&c, order, sep, ptol) {
                        raw.push((w, wt, tag == 0));
                    }
                    if tag == 0 {
                        in_len = raw.len();
                    }
                }
                let lcs: Vec<LogComplex> = raw
                    .iter()
                    .map(|&(w, wt, _)| {
                        LogComplex::exp_of(f.exponent(w).scale(sgn))
                            * LogComplex::from_complex(wt / two_pi_i)
                    })
                    .collect();
                let scale = lcs
                    .iter()
                    .filter(|l| !l.is_zero())
                    .map(|l| l.log_mag)
                    .fold(f64::NEG_INFINITY, f64::max);
                let scale = if scale.is_finite() { scale } else { 0.0 };
                let nodes: Vec<EngineNode> = raw
                    .iter()
                    .zip(&lcs)
                    .map(|(&(w, _, is_in), lc)| EngineNode {
                        w,
                        amp: lc.scaled(-scale).to_complex_lossy(),
                        is_in,
                    })
                    .collect();
                outs[side] = Arc::new(nodes[in_len..].to_vec());
                lists[side] = Arc::new(nodes);
                sc[side] = scale;
            }
            combined.push(lists);
            out_only.push(outs);
            scales.push(sc);
        }
        self.sets[pi] = Some(LevelLists {
            combined,
            out_only,
            scales,
        });
    }
}

// ---------------------------------------------------------------------------
// circle coefficients
// ---------------------------------------------------------------------------

/// Coefficient carried by one circle once the contour choices of the next
/// level are grouped by their number j of in-contour picks:
///
///   ∮ (1−z)^{n_c} (1−z⁻¹)^{n_{c+1}} (1−z)^{−j} (−z/(1−z))^{2n_{c+1}−j}
///     dz / (2πi·z(1−z))
///
/// over a counterclockwise circle of the given radius > 1, by the trapezoid
/// rule. The value is a Laurent coefficient of a rational function, hence
/// real and independent of the radius.
pub(crate) fn zeta_profile(
    n_c: usize,
    n_cp1: usize,
    j: usize,
    radius: f64,
    nodes: usize,
) -> Complex64 {
    debug_assert!(j <= 2 * n_cp1);
    let one = Complex64::new(1.0, 0.0);
    let mut acc = CompensatedSum::new();
    for k in 0..nodes {
        let th = 2.0 * PI * k as f64 / nodes as f64;
        let z = Complex64::from_polar(radius, th);
        let omz = one - z;
        let g = omz.powi(n_c as i32 - j as i32)
            * (one - one / z).powi(n_cp1 as i32)
            * (-z / omz).powi((2 * n_cp1 - j) as i32);
        acc.add(g / omz);
    }
    acc.total() / nodes as f64
}

// ---------------------------------------------------------------------------
// tensor engine: ordered multiset iteration over exchangeable variables
// ---------------------------------------------------------------------------

pub(crate) const NO_SLOT: usize = usize::MAX;

/// A block of exchangeable variables drawing from one node list.
pub(crate) struct Group {
    pub nodes: Arc<Vec<EngineNode>>,
    pub count: usize,
    /// Index into the leaf's in-count array fed by this group's tags;
    /// `NO_SLOT` if untracked.
    pub slot: usize,
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c
}

/// Node tuples the engine will visit. Variables within a group are summed
/// over strictly increasing node indices (tuples with a repeated node vanish:
/// every group appears jointly in some determinant numerator), with
/// multiplicities restoring the free product; the first variable overall is
/// unrestricted and optionally halved by conjugate symmetry.
pub(crate) fn engine_cost(groups: &[Group], half: bool) -> f64 {
    let mut cost = 1.0;
    let mut outer_placed = false;
    for g in groups {
        if g.count == 0 {
            continue;
        }
        let n = g.nodes.len();
        if !outer_placed {
            outer_placed = true;
            let n0 = if half {
                g.nodes.iter().filter(|e| e.w.im > 0.0).count()
            } else {
                n
            };
            cost *= n0 as f64 * binomial(n, g.count - 1);
        } else {
            cost *= binomial(n, g.count);
        }
    }
    cost
}

#[allow(clippy::too_many_arguments)]
fn descend<L>(
    groups: &[Group],
    order: &[(usize, usize)],
    g0: usize,
    depth: usize,
    amp: Complex64,
    coords: &mut [Vec<Complex64>],
    picks: &mut [Vec<usize>],
    in_counts: &mut [usize],
    leaf: &L,
    acc: &mut CompensatedSum,
) where
    L: Fn(&[Vec<Complex64>], &[usize]) -> Complex64 + Sync,
{
    if depth == order.len() {
        acc.add(leaf(coords, in_counts) * amp);
        return;
    }
    let (g, p) = order[depth];
    let grp = &groups[g];
    // Position inside the group's ordered block; the free outer variable of
    // group g0 is not part of the ordering.
    let mq = p - usize::from(g == g0);
    let start = if mq == 0 { 0 } else { picks[g][mq - 1] + 1 };
    let mult = (mq + 1) as f64;
    for i in start..grp.nodes.len() {
        let node = grp.nodes[i];
        coords[g].push(node.w);
        picks[g].push(i);
        let tagged = grp.slot != NO_SLOT && node.is_in;
        if tagged {
            in_counts[grp.slot] += 1;
        }
        descend(
            groups,
            order,
            g0,
            depth + 1,
            amp * node.amp * mult,
            coords,
            picks,
            in_counts,
            leaf,
            acc,
        );
        if tagged {
            in_counts[grp.slot] -= 1;
        }
        picks[g].pop();
        coords[g].pop();
    }
}

/// Sum `leaf(coords, in_counts) · Π amps` over all node tuples. With `half`
/// set, the first variable runs over the upper half-plane only and the real
/// part is doubled, which is exact when node lists are closed under
/// conjugation and the leaf commutes with it. Deterministic regardless of
/// thread count.
pub(crate) fn engine_run<L>(groups: &[Group], n_slots: usize, half: bool, leaf: &L) -> Complex64
where
    L: Fn(&[Vec<Complex64>], &[usize]) -> Complex64 + Sync,
{
    let order: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, grp)| (0..grp.count).map(move |p| (g, p)))
        .collect();
    if order.is_empty() {
        let coords: Vec<Vec<Complex64>> = groups.iter().map(|_| Vec::new()).collect();
        return leaf(&coords, &vec![0; n_slots]);
    }
    let g0 = order[0].0;
    let outer: Vec<usize> = (0..groups[g0].nodes.len())
        .filter(|&i| !half || groups[g0].nodes[i].w.im > 0.0)
        .collect();
    let total = deterministic_sum(outer.len(), |oi| {
        let mut coords: Vec<Vec<Complex64>> = groups
            .iter()
            .map(|g| Vec::with_capacity(g.count))
            .collect();
        let mut picks: Vec<Vec<usize>> = groups
            .iter()
            .map(|g| Vec::with_capacity(g.count))
            .collect();
        let mut in_counts = vec![0usize; n_slots];
        let node = groups[g0].nodes[outer[oi]];
        coords[g0].push(node.w);
        if groups[g0].slot != NO_SLOT && node.is_in {
            in_counts[groups[g0].slot] += 1;
        }
        let mut acc = CompensatedSum::new();
        descend(
            groups,
            &order,
            g0,
            1,
            node.amp,
            &mut coords,
            &mut picks,
            &mut in_counts,
            leaf,
            &mut acc,
        );
        acc.total()
    });
    if half {
        Complex64::new(2.0 * total.re, 0.0)
    } else {
        total
    }
}

// ---------------------------------------------------------------------------
// the main integrand
// ---------------------------------------------------------------------------

/// Cauchy-determinant chain linking consecutive levels, times the circle
/// coefficients looked up by in-contour counts, times the derivative
/// statistic when differentiating.
fn main_leaf(
    m: usize,
    zeta: &[Option<Vec<f64>>],
    mode: Mode,
    coords: &[Vec<Complex64>],
    in_counts: &[usize],
) -> Complex64 {
    let u = |ell: usize| &coords[2 * (ell - 2)];
    let v = |ell: usize| &coords[2 * (ell - 2) + 1];
    let one = Complex64::new(1.0, 0.0);
    let mut a = [Complex64::new(0.0, 0.0); 2 * MAX_OCCUPANCY];
    let mut b = a;
    // first link: fixed points ∓1 joined with the level-2 sets
    let n2 = u(2).len();
    a[0] = -one;
    b[0] = one;
    a[1..1 + n2].copy_from_slice(v(2));
    b[1..1 + n2].copy_from_slice(u(2));
    let mut chain = cauchy_det_direct(&a[..1 + n2], &b[..1 + n2]);
    for ell in 2..m {
        let (x, y) = (u(ell), v(ell + 1));
        let na = x.len() + y.len();
        a[..x.len()].copy_from_slice(x);
        a[x.len()..na].copy_from_slice(y);
        let (xt, yt) = (v(ell), u(ell + 1));
        b[..xt.len()].copy_from_slice(xt);
        b[xt.len()..na].copy_from_slice(yt);
        chain *= cauchy_det_direct(&a[..na], &b[..na]);
    }
    if m >= 2 {
        chain *= cauchy_det_direct(u(m), v(m));
    }
    let mut out = chain;
    for (ci, tab) in zeta.iter().enumerate() {
        if let Some(t) = tab {
            out *= t[in_counts[ci]];
        }
    }
    match mode {
        Mode::Plain => out,
        Mode::BetaDeriv(k) => {
            let s = |cs: &[Complex64]| cs.iter().sum::<Complex64>();
            let d = |ell: usize| s(u(ell)) - s(v(ell));
            let h = if k == 1 {
                Complex64::new(-2.0, 0.0) - d(2)
            } else if k == m {
                d(m)
            } else {
                d(k) - d(k + 1)
            };
            out * h
        }
    }
}

pub(crate) fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

fn make_groups(geom: &Geometry, pi: usize, n_vec: &[usize], params: &EvalParams) -> Vec<Group> {
    let sets = geom.sets[pi].as_ref().expect("node lists built");
    let mut groups = Vec::with_capacity(2 * (geom.m - 1));
    for ell in 2..=geom.m {
        for side in 0..2 {
            let nodes = if ell == 2 && !params.validate_def22 {
                sets.out_only[0][side].clone()
            } else {
                sets.combined[ell - 2][side].clone()
            };
            groups.push(Group {
                nodes,
                count: n_vec[ell - 1],
                slot: ell - 2,
            });
        }
    }
    groups
}

struct TermOut {
    value: f64,
    imag: f64,
    zeta_imag: f64,
}

/// Evaluate one series term at ladder rung `pi`. The caller has already
/// checked the tuple budget.
fn eval_term(
    geom: &Geometry,
    params: &EvalParams,
    pi: usize,
    n_vec: &[usize],
    mode: Mode,
) -> Result<TermOut> {
    let m = geom.m;
    let sets = geom.sets[pi].as_ref().expect("node lists built");
    let groups = make_groups(geom, pi, n_vec, params);
    let mut zeta: Vec<Option<Vec<f64>>> = Vec::with_capacity(m - 1);
    let mut zeta_imag = 0.0f64;
    for c in 1..m {
        if c == 1 && !params.validate_def22 {
            zeta.push(None);
            continue;
        }
        let tab: Vec<f64> = (0..=2 * n_vec[c])
            .map(|j| {
                let z = zeta_profile(n_vec[c - 1], n_vec[c], j, params.z_radius, params.z_nodes);
                zeta_imag = zeta_imag.max(z.im.abs());
                z.re
            })
            .collect();
        zeta.push(Some(tab));
    }
    let mut log_pref = LN_2 + geom.f1_log;
    for ell in 2..=m {
        let s = sets.scales[ell - 2];
        log_pref += n_vec[ell - 1] as f64 * (s[0] + s[1]) - 2.0 * ln_factorial(n_vec[ell - 1]);
    }
    if log_pref > 650.0 {
        return Err(Error::Overflow { log_mag: log_pref });
    }
    let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
    let half = !params.full_nodes;
    let leaf =
        |coords: &[Vec<Complex64>], ic: &[usize]| main_leaf(m, &zeta, mode, coords, ic);
    let total = engine_run(&groups, m - 1, half, &leaf);
    let scale = sign * log_pref.exp();
    Ok(TermOut {
        value: scale * total.re,
        imag: scale * total.im,
        zeta_imag,
    })
}

// ---------------------------------------------------------------------------
// truncation certificate
// ---------------------------------------------------------------------------

fn surrogate_groups(geom: &Geometry, pi: usize, ell: usize, count: usize) -> Vec<Group> {
    let sets = geom.sets[pi].as_ref().expect("node lists built");
    (0..2)
        .map(|side| Group {
            nodes: sets.out_only[ell - 2][side].clone(),
            count,
            slot: NO_SLOT,
        })
        .collect()
}

/// First-increment decay ratio for one level, measured on a two-level
/// surrogate: the level's own out-contour node lists anchored by the fixed
/// points ∓1, occupation 1 versus 2, including the factorial weights. The
/// surrogate shares its amplitudes (exponential factors, contours,
/// quadrature weights) with the full series; for two-point configurations it
/// coincides with the exact first-increment ratio.
pub(crate) fn surrogate_ratio(
    geom: &mut Geometry,
    params: &EvalParams,
    ell: usize,
    half: bool,
) -> Result<f64> {
    let mut within = None;
    let mut afford = None;
    for pi in 0..geom.ladder.len() {
        if geom.ladder[pi].1 > CERT_PTOL_MAX {
            break;
        }
        geom.ensure_lists(pi);
        let cost = engine_cost(&surrogate_groups(geom, pi, ell, 2), half);
        if cost <= CERT_BUDGET {
            within = Some(pi);
            break;
        }
        if cost <= params.max_tuples {
            afford = Some(pi);
        }
    }
    let Some(pi) = within.or(afford) else {
        return Err(Error::Truncation {
            certificate: f64::INFINITY,
            target: params.target_tol,
        });
    };
    let sets = geom.sets[pi].as_ref().expect("node lists built");
    let scale = sets.scales[ell - 2][0] + sets.scales[ell - 2][1];
    let one = Complex64::new(1.0, 0.0);
    let leaf = |coords: &[Vec<Complex64>], _ic: &[usize]| {
        let (us, vs) = (&coords[0], &coords[1]);
        let n = us.len();
        let mut a = [Complex64::new(0.0, 0.0); 1 + MAX_OCCUPANCY];
        let mut b = a;
        a[0] = -one;
        b[0] = one;
        a[1..1 + n].copy_from_slice(vs);
        b[1..1 + n].copy_from_slice(us);
        cauchy_det_direct(&a[..1 + n], &b[..1 + n]) * cauchy_det_direct(us, vs)
    };
    let mut log_abs = [0.0f64; 2];
    for count in 1..=2usize {
        let groups = surrogate_groups(geom, pi, ell, count);
        let total = engine_run(&groups, 0, half, &leaf);
        let mag = if half { total.re.abs() } else { total.norm() };
        log_abs[count - 1] =
            count as f64 * scale - 2.0 * ln_factorial(count) + mag.max(1e-300).ln();
    }
    Ok((log_abs[1] - log_abs[0]).exp())
}

/// Modeled relative size of occupation k in one slot: c^{k−1}·k^k/(k!)²,
/// normalized to 1 at k = 1. The constant c is measured per call from the
/// computed first-increment surrogate ratio, with a safety factor.
fn phi_slot(c: f64, k: usize) -> f64 {
    if k <= 1 {
        return 1.0;
    }
    let kf = k as f64;
    let ln_phi = (kf - 1.0) * c.ln() + kf * kf.ln() - 2.0 * ln_factorial(k);
    ln_phi.exp()
}

pub(crate) fn est_rel(cs: &[f64], n_vec: &[usize]) -> f64 {
    cs.iter()
        .enumerate()
        .map(|(i, &c)| phi_slot(c, n_vec[i + 1]))
        .product()
}

/// (Σ_{k≥1} φ, Σ_{k>cap} φ) for one slot.
pub(crate) fn slot_sums(c: f64, cap: usize) -> (f64, f64) {
    let mut all = 0.0;
    let mut tail = 0.0;
    for k in 1..=80 {
        let p = phi_slot(c, k);
        if !p.is_finite() {
            return (f64::INFINITY, f64::INFINITY);
        }
        all += p;
        if k > cap {
            tail += p;
        }
        if k > cap && p < 1e-18 * (all + 1e-300) {
            break;
        }
    }
    (all, tail)
}

/// Occupation vectors in the box Π {1..caps[i]} other than all-ones,
/// ordered by total occupation then lexicographically.
pub(crate) fn box_terms(caps: &[usize]) -> Vec<Vec<usize>> {
    let dims = caps.len();
    let mut out = Vec::new();
    let mut idx = vec![1usize; dims];
    'outer: loop {
        if idx.iter().any(|&x| x > 1) {
            let mut v = Vec::with_capacity(dims + 1);
            v.push(1);
            v.extend_from_slice(&idx);
            out.push(v);
        }
        for d in 0..dims {
            idx[d] += 1;
            if idx[d] <= caps[d] {
                continue 'outer;
            }
            idx[d] = 1;
        }
        break;
    }
    out.sort_by_key(|v| (v.iter().sum::<usize>(), v.clone()));
    out
}

// ---------------------------------------------------------------------------
// series driver
// ---------------------------------------------------------------------------

fn series_eval(config: &OrderedConfig, params: &EvalParams, mode: Mode) -> Result<Evaluation> {
    let m = config.m();
    let ladder = validated_ladder(params, m)?;
    let mut geom = Geometry::build(config, params, ladder, None)?;
    let half = !params.full_nodes;
    let n_slots = m - 1;
    let mut diagnostics = BTreeMap::new();

    // Leading term, at the finest affordable rung; never dropped.
    let base_vec = vec![1usize; m];
    let mut base: Option<(TermOut, usize)> = None;
    for pi in 0..geom.ladder.len() {
        geom.ensure_lists(pi);
        if engine_cost(&make_groups(&geom, pi, &base_vec, params), half) <= params.max_tuples {
            base = Some((eval_term(&geom, params, pi, &base_vec, mode)?, pi));
            break;
        }
    }
    let Some((base_out, base_pi)) = base else {
        return Err(Error::Truncation {
            certificate: f64::INFINITY,
            target: params.target_tol,
        });
    };
    let t_base = base_out.value.abs().max(1e-300);
    diagnostics.insert("base_panel_order".into(), geom.ladder[base_pi].0 as f64);

    // A level whose time gap is zero admits only occupation one: its
    // exponential factor is then an entire function of order two, the level
    // kernel degenerates to rank one, and every higher-occupation term
    // vanishes identically (the zero-gap slice of the field is Brownian for
    // the same reason). Such slots are excluded from the box and contribute
    // neither a decay measurement nor a truncation tail.
    let zero_gap: Vec<bool> = (0..n_slots)
        .map(|i| geom.factors[i + 1].cubic == 0.0)
        .collect();
    let caps: Vec<usize> = zero_gap
        .iter()
        .map(|&z| if z { 1 } else { params.n_max })
        .collect();

    // Measured per-slot decay constants for the certificate.
    let mut cs = vec![0.0f64; n_slots];
    for ell in 2..=m {
        if zero_gap[ell - 2] {
            diagnostics.insert(format!("rho_{ell}"), 0.0);
            continue;
        }
        let rho = surrogate_ratio(&mut geom, params, ell, half)?;
        cs[ell - 2] = RHO_SAFETY * rho;
        diagnostics.insert(format!("rho_{ell}"), rho);
    }

    let box_count: f64 = caps.iter().map(|&c| c as f64).product();
    let q_allow = 0.1 * params.target_tol / box_count;
    let drop_thresh = 0.1 * params.target_tol;

    let mut sum = CompensatedSum::new();
    sum.add_real(base_out.value);
    let mut quad_err = PANEL_FUDGE * geom.ladder[base_pi].1 * base_out.value.abs();
    let mut imag_residual = base_out.imag.abs();
    let mut zeta_imag = base_out.zeta_imag;
    let mut terms_used = 1usize;
    let mut dropped_rel = 0.0f64;
    let mut dropped_n = 0usize;
    let mut last_rel = 1.0f64;

    for n_vec in box_terms(&caps) {
        let est = est_rel(&cs, &n_vec);
        if est < drop_thresh {
            dropped_rel += est;
            dropped_n += 1;
            continue;
        }
        // Coarsest rung whose panel error keeps this term's share of the
        // budget; otherwise the finest affordable one.
        let mut fitted: Option<usize> = None;
        let mut finest: Option<usize> = None;
        for pi in (0..geom.ladder.len()).rev() {
            geom.ensure_lists(pi);
            if engine_cost(&make_groups(&geom, pi, &n_vec, params), half) > params.max_tuples {
                continue;
            }
            finest = Some(finest.map_or(pi, |a: usize| a.min(pi)));
            if PANEL_FUDGE * geom.ladder[pi].1 * est <= q_allow {
                fitted = Some(pi);
                break;
            }
        }
        match fitted.or(finest) {
            Some(pi) => {
                let out = eval_term(&geom, params, pi, &n_vec, mode)?;
                sum.add_real(out.value);
                quad_err += PANEL_FUDGE * geom.ladder[pi].1 * out.value.abs();
                imag_residual += out.imag.abs();
                zeta_imag = zeta_imag.max(out.zeta_imag);
                terms_used += 1;
                last_rel = out.value.abs() / t_base;
            }
            None => {
                if est < params.target_tol {
                    dropped_rel += est;
                    dropped_n += 1;
                } else {
                    return Err(Error::Truncation {
                        certificate: est,
                        target: params.target_tol,
                    });
                }
            }
        }
    }

    // Everything outside the box, by a union bound over which slot exceeds
    // the cap.
    let sums: Vec<(f64, f64)> = cs
        .iter()
        .zip(&caps)
        .map(|(&c, &cap)| slot_sums(c, cap))
        .collect();
    let mut beyond = 0.0f64;
    for i in 0..n_slots {
        let mut contrib = sums[i].1;
        for (j, s) in sums.iter().enumerate() {
            if j != i {
                contrib *= s.0;
            }
        }
        beyond += contrib;
    }
    let trunc_rel = beyond + dropped_rel;
    if !trunc_rel.is_finite() || trunc_rel > params.target_tol {
        return Err(Error::Truncation {
            certificate: trunc_rel,
            target: params.target_tol,
        });
    }

    diagnostics.insert("terms_dropped".into(), dropped_n as f64);
    diagnostics.insert("beyond_rel".into(), beyond);
    diagnostics.insert("dropped_rel".into(), dropped_rel);
    diagnostics.insert("last_term_rel".into(), last_rel);
    diagnostics.insert("imag_residual".into(), imag_residual);
    diagnostics.insert("zeta_imag".into(), zeta_imag);
    diagnostics.insert("trunc_rel".into(), trunc_rel);
    let truncation_bound = trunc_rel * t_base;
    Ok(Evaluation {
        value: sum.total().re,
        abs_err_estimate: quad_err + imag_residual + truncation_bound,
        terms_used,
        truncation_bound,
        diagnostics,
    })
}

// ---------------------------------------------------------------------------
// reduction of dominated points
// ---------------------------------------------------------------------------

fn gaussian_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Detect a point whose constraint is implied by its predecessor so strongly
/// that dropping it is below double-precision resolution: a threshold gap
/// under −10 that is also at least 8 local fluctuation scales deep. Returns
/// the 1-based index and a bound on the induced error.
fn reduction_target(config: &OrderedConfig) -> Option<(usize, f64)> {
    let factors = config.factors();
    for ell in 2..=config.m() {
        let f = factors[ell - 1];
        let dbeta = f.lin;
        let dalpha = f.quad;
        let dtau = -3.0 * f.cubic;
        if dbeta >= REDUCTION_BETA_GAP {
            continue;
        }
        if dtau > 0.0 {
            let s = dbeta / dtau.powf(1.0 / 3.0) + dalpha * dalpha / dtau.powf(4.0 / 3.0);
            if s < REDUCTION_Z {
                // leading-order left-tail decay of the one-point law
                return Some((ell, (-s.abs().powi(3) / 12.0).exp()));
            }
        } else {
            // equal times: the increment is Gaussian with variance 2Δα
            let z = (dbeta + 2.0 * dalpha) / (2.0 * dalpha).sqrt();
            if z < REDUCTION_Z {
                return Some((ell, gaussian_cdf(z)));
            }
        }
    }
    None
}

fn reduced_config(config: &OrderedConfig, ell: usize) -> Result<OrderedConfig> {
    let mut pts = config.points.clone();
    let mut bts = config.betas.clone();
    pts.remove(ell - 1);
    bts.remove(ell - 1);
    OrderedConfig::new(pts, bts)
}

fn note_reduction(ev: &mut Evaluation, est: f64) {
    *ev.diagnostics
        .entry("reduction_dropped".into())
        .or_insert(0.0) += 1.0;
    *ev.diagnostics
        .entry("reduction_error_estimate".into())
        .or_insert(0.0) += est;
    ev.abs_err_estimate += est;
}

// ---------------------------------------------------------------------------
// public evaluators
// ---------------------------------------------------------------------------

/// Evaluate T for an ordered configuration.
pub fn t_general(config: &OrderedConfig, params: &EvalParams) -> Result<Evaluation> {
    if config.m() == 1 {
        let (alpha, tau) = config.points[0];
        return Ok(Evaluation::exact(t_m1(config.betas[0], alpha, tau)));
    }
    if let Some((ell, est)) = reduction_target(config) {
        let reduced = reduced_config(config, ell)?;
        let mut ev = t_general(&reduced, params)?;
        note_reduction(&mut ev, est);
        return Ok(ev);
    }
    series_eval(config, params, Mode::Plain)
}

/// Evaluate ∂T/∂β_k (k is 1-based in the sorted configuration).
pub fn t_beta_derivative(
    config: &OrderedConfig,
    k: usize,
    params: &EvalParams,
) -> Result<Evaluation> {
    let m = config.m();
    if k == 0 || k > m {
        return Err(Error::Dimension(format!(
            "derivative index must lie in 1..={m}, got {k}"
        )));
    }
    if m == 1 {
        let (alpha, tau) = config.points[0];
        return Ok(Evaluation::exact(-2.0 * t_m1(config.betas[0], alpha, tau)));
    }
    if let Some((ell, est)) = reduction_target(config) {
        if ell == k {
            // the derivative in a direction whose constraint is inactive
            let mut ev = Evaluation::exact(0.0);
            note_reduction(&mut ev, est);
            return Ok(ev);
        }
        let reduced = reduced_config(config, ell)?;
        let k_red = if k > ell { k - 1 } else { k };
        let mut ev = t_beta_derivative(&reduced, k_red, params)?;
        note_reduction(&mut ev, est);
        return Ok(ev);
    }
    series_eval(config, params, Mode::BetaDeriv(k))
}

// ---------------------------------------------------------------------------
// single-summand evaluation at explicit circle variables
// ---------------------------------------------------------------------------

fn kn_groups(geom: &Geometry, pi: usize, n_vec: &[usize], z_vec: &[Complex64]) -> Vec<Group> {
    let sets = geom.sets[pi].as_ref().expect("node lists built");
    let one = Complex64::new(1.0, 0.0);
    let mut groups = Vec::with_capacity(2 * (geom.m - 1));
    for ell in 2..=geom.m {
        let z = z_vec[ell - 2];
        let cin = one / (one - z);
        let cout = -z / (one - z);
        for side in 0..2 {
            let nodes: Vec<EngineNode> = sets.combined[ell - 2][side]
                .iter()
                .map(|e| EngineNode {
                    w: e.w,
                    amp: e.amp * if e.is_in { cin } else { cout },
                    is_in: e.is_in,
                })
                .collect();
            groups.push(Group {
                nodes: Arc::new(nodes),
                count: n_vec[ell - 1],
                slot: NO_SLOT,
            });
        }
    }
    groups
}

/// The integrand of the series at fixed circle variables z₂, …, z_m (one per
/// level past the first): the Cauchy-determinant chain integrated over the
/// contour variables, with each contour-choice coefficient applied per
/// variable, times 2, the fixed-point factor, and Π (1−z_c)^{n_c}(1−z_c⁻¹)^{n_{c+1}}.
/// No factorial weights and no overall sign are included.
pub fn k_n(
    n_vec: &[usize],
    config: &OrderedConfig,
    z_vec: &[Complex64],
    family: &ContourFamily,
    params: &EvalParams,
) -> Result<Complex64> {
    let m = config.m();
    if n_vec.len() != m {
        return Err(Error::Dimension(format!(
            "expected {m} occupation numbers, got {}",
            n_vec.len()
        )));
    }
    if n_vec[0] != 1 {
        return Err(Error::Order(format!(
            "the first occupation number must be 1, got {}",
            n_vec[0]
        )));
    }
    if n_vec.iter().any(|&n| n == 0 || n > MAX_OCCUPANCY) {
        return Err(Error::Order(format!(
            "occupation numbers must lie in 1..={MAX_OCCUPANCY}, got {n_vec:?}"
        )));
    }
    if z_vec.len() + 1 != m {
        return Err(Error::Dimension(format!(
            "expected {} circle variables, got {}",
            m - 1,
            z_vec.len()
        )));
    }
    if family.m() != m {
        return Err(Error::Dimension(format!(
            "contour family is for m = {}, config has m = {m}",
            family.m()
        )));
    }
    let one = Complex64::new(1.0, 0.0);
    for &z in z_vec {
        if z.norm() < 1e-12 || (z - one).norm() < 1e-12 {
            return Err(Error::Domain(format!(
                "circle variables must avoid 0 and 1, got {z}"
            )));
        }
    }
    let ladder = validated_ladder(params, m)?;
    let mut geom = Geometry::build(config, params, ladder, Some(family.clone()))?;
    let mut chosen = None;
    for pi in 0..geom.ladder.len() {
        geom.ensure_lists(pi);
        if engine_cost(&kn_groups(&geom, pi, n_vec, z_vec), false) <= params.max_tuples {
            chosen = Some(pi);
            break;
        }
    }
    let Some(pi) = chosen else {
        return Err(Error::Truncation {
            certificate: f64::INFINITY,
            target: params.target_tol,
        });
    };
    let groups = kn_groups(&geom, pi, n_vec, z_vec);
    let zeta: Vec<Option<Vec<f64>>> = vec![None; m - 1];
    let leaf =
        |coords: &[Vec<Complex64>], ic: &[usize]| main_leaf(m, &zeta, Mode::Plain, coords, ic);
    let total = engine_run(&groups, m - 1, false, &leaf);
    let sets = geom.sets[pi].as_ref().unwrap();
    let mut lc = LogComplex::new(LN_2 + geom.f1_log, 0.0);
    for ell in 2..=m {
        let s = sets.scales[ell - 2];
        lc = lc.scaled(n_vec[ell - 1] as f64 * (s[0] + s[1]));
    }
    for c in 1..m {
        let z = z_vec[c - 1];
        lc = lc
            * LogComplex::from_complex(one - z).powi(n_vec[c - 1] as i32)
            * LogComplex::from_complex(one - one / z).powi(n_vec[c] as i32);
    }
    (lc * LogComplex::from_complex(total)).to_complex()
}

// ---------------------------------------------------------------------------
// two-point decomposition for far-tail differences
// ---------------------------------------------------------------------------

/// T(0, β; (0,0), (α,τ)) − exp((2/3)τ − 2β), split into four residue pieces
/// so the near-total cancellation at large β never happens in floating
/// point. Piece values include their sign and prefactor; the difference is
/// their plain sum.
#[derive(Clone, Debug)]
pub struct M2Decomposition {
    pub t0: Evaluation,
    pub t1: Evaluation,
    pub tm1: Evaluation,
    pub t2_remainder: Evaluation,
}

impl M2Decomposition {
    pub fn tail_difference(&self) -> f64 {
        self.t0.value + self.t1.value + self.tm1.value + self.t2_remainder.value
    }

    pub fn abs_err_estimate(&self) -> f64 {
        self.t0.abs_err_estimate
            + self.t1.abs_err_estimate
            + self.tm1.abs_err_estimate
            + self.t2_remainder.abs_err_estimate
    }
}

/// Pairwise-difference ratio Π(Δu)²·Π(Δv)² / ΠΠ(u−v)².
fn squared_cross_ratio(us: &[Complex64], vs: &[Complex64]) -> Complex64 {
    let mut num = Complex64::new(1.0, 0.0);
    for i in 0..us.len() {
        for j in (i + 1)..us.len() {
            let d = us[i] - us[j];
            num *= d * d;
        }
    }
    for i in 0..vs.len() {
        for j in (i + 1)..vs.len() {
            let d = vs[i] - vs[j];
            num *= d * d;
        }
    }
    let mut den = Complex64::new(1.0, 0.0);
    for &u in us {
        for &v in vs {
            let d = u - v;
            den *= d * d;
        }
    }
    num / den
}

/// Preferred ladder rung per series index in the decomposition, before cost
/// adjustments.
const DEC_RUNG: [usize; 4] = [0, 2, 4, 6];
const DEC_NMAX: usize = 4;

#[allow(clippy::too_many_arguments)]
fn piece_series(
    cu: &RayContour,
    cv: &RayContour,
    sing: [f64; 2],
    f2: ExpFactorParams,
    ladder: &[(usize, f64)],
    params: &EvalParams,
    log_front: f64,
    sizes: impl Fn(usize) -> (usize, usize),
    term_sign: impl Fn(usize) -> f64,
    log_weight: impl Fn(usize) -> f64,
    gu: impl Fn(Complex64) -> Complex64,
    gv: impl Fn(Complex64) -> Complex64,
    n_start: usize,
) -> Result<Evaluation> {
    let half = !params.full_nodes;
    let two_pi_i = Complex64::new(0.0, 2.0 * PI);
    // node lists and scales per ladder rung, built on demand
    let mut cache: Vec<Option<([Arc<Vec<EngineNode>>; 2], [f64; 2])>> = vec![None; ladder.len()];
    let build = |pi: usize, cache: &mut Vec<Option<([Arc<Vec<EngineNode>>; 2], [f64; 2])>>| {
        if cache[pi].is_some() {
            return;
        }
        let (order, ptol) = ladder[pi];
        let mut lists: [Arc<Vec<EngineNode>>; 2] = [Arc::new(Vec::new()), Arc::new(Vec::new())];
        let mut scales = [0.0f64; 2];
        for (side, contour) in [(0usize, cu), (1, cv)] {
            let sgn = if side == 0 { 1.0 } else { -1.0 };
            let raw = discretize_graded(contour, order, sing[side], ptol);
            let lcs: Vec<LogComplex> = raw
                .iter()
                .map(|&(w, wt)| {
                    let g = if side == 0 { gu(w) } else { gv(w) };
                    LogComplex::exp_of(f2.exponent(w).scale(sgn))
                        * LogComplex::from_complex(g * wt / two_pi_i)
                })
                .collect();
            let scale = lcs
                .iter()
                .filter(|l| !l.is_zero())
                .map(|l| l.log_mag)
                .fold(f64::NEG_INFINITY, f64::max);
            let scale = if scale.is_finite() { scale } else { 0.0 };
            lists[side] = Arc::new(
                raw.iter()
                    .zip(&lcs)
                    .map(|(&(w, _), lc)| EngineNode {
                        w,
                        amp: lc.scaled(-scale).to_complex_lossy(),
                        is_in: false,
                    })
                    .collect(),
            );
            scales[side] = scale;
        }
        cache[pi] = Some((lists, scales));
    };

    let mut sum = CompensatedSum::new();
    let mut quad_err = 0.0f64;
    let mut imag_residual = 0.0f64;
    let mut terms_used = 0usize;
    let mut prev_abs: Option<f64> = None;
    let mut last_abs = 0.0f64;
    let mut ratio = 0.5f64;
    let mut diagnostics = BTreeMap::new();

    for n in n_start..=DEC_NMAX {
        let (ku, kv) = sizes(n);
        let mut pi = DEC_RUNG[n - n_start].min(ladder.len() - 1);
        let cost_at = |pi: usize, cache: &mut Vec<_>| {
            build(pi, cache);
            let (lists, _) = cache[pi].as_ref().unwrap();
            let groups = [
                Group {
                    nodes: lists[0].clone(),
                    count: ku,
                    slot: NO_SLOT,
                },
                Group {
                    nodes: lists[1].clone(),
                    count: kv,
                    slot: NO_SLOT,
                },
            ];
            engine_cost(&groups, half)
        };
        while cost_at(pi, &mut cache) > params.max_tuples && pi + 1 < ladder.len() {
            pi += 1;
        }
        if cost_at(pi, &mut cache) > params.max_tuples {
            if n == n_start {
                return Err(Error::Truncation {
                    certificate: f64::INFINITY,
                    target: params.target_tol,
                });
            }
            break;
        }
        let (lists, scales) = cache[pi].as_ref().unwrap();
        let log_pref = log_front + ku as f64 * scales[0] + kv as f64 * scales[1] + log_weight(n);
        if log_pref > 650.0 {
            return Err(Error::Overflow { log_mag: log_pref });
        }
        let groups = [
            Group {
                nodes: lists[0].clone(),
                count: ku,
                slot: NO_SLOT,
            },
            Group {
                nodes: lists[1].clone(),
                count: kv,
                slot: NO_SLOT,
            },
        ];
        let leaf =
            |coords: &[Vec<Complex64>], _ic: &[usize]| squared_cross_ratio(&coords[0], &coords[1]);
        let total = engine_run(&groups, 0, half, &leaf);
        let scale = term_sign(n) * log_pref.exp();
        let value = scale * total.re;
        sum.add_real(value);
        quad_err += PANEL_FUDGE * ladder[pi].1 * value.abs();
        imag_residual += (scale * total.im).abs();
        terms_used += 1;
        if let Some(p) = prev_abs {
            if p > 0.0 {
                ratio = (value.abs() / p).min(0.9);
            }
        }
        prev_abs = Some(value.abs());
        last_abs = value.abs();
        if terms_used > 1 && last_abs <= 1e-16 * sum.total().re.abs() {
            break;
        }
    }
    let tail = last_abs * ratio / (1.0 - ratio);
    diagnostics.insert("tail_ratio".into(), ratio);
    diagnostics.insert("imag_residual".into(), imag_residual);
    Ok(Evaluation {
        value: sum.total().re,
        abs_err_estimate: quad_err + imag_residual + tail,
        terms_used,
        truncation_bound: tail,
        diagnostics,
    })
}

/// Two-point difference T(0, β; (0,0), (α,τ)) − exp((2/3)τ − 2β) evaluated
/// piece by piece on steepest-descent wedges. Requires τ > 0.
pub fn t_m2_decomposed(
    beta: f64,
    alpha: f64,
    tau: f64,
    params: &EvalParams,
) -> Result<M2Decomposition> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!(
            "t_m2_decomposed requires tau > 0, got {tau}"
        )));
    }
    let ladder = validated_ladder(params, 2)?;
    let f2 = ExpFactorParams {
        cubic: -tau / 3.0,
        quad: alpha,
        lin: beta,
    };
    let disc = alpha * alpha + beta * tau;
    let (u_star, v_star) = if disc > 0.0 {
        ((alpha - disc.sqrt()) / tau, (alpha + disc.sqrt()) / tau)
    } else {
        (-1.5, 1.5)
    };
    let apex_u = u_star.min(-1.3);
    let apex_v = v_star.max(1.3);
    let mut cu = RayContour::wedge(apex_u, 2.0 * PI / 3.0);
    let mut cv = RayContour::wedge(apex_v, PI / 3.0);
    fit_radius(&mut cu, |w| f2.re_exponent(w), params.trunc_tol);
    fit_radius(&mut cv, |w| -f2.re_exponent(w), params.trunc_tol);
    cu.truncation_radius = (cu.truncation_radius * 2.0 * params.radius_scale).min(120.0);
    cv.truncation_radius = (cv.truncation_radius * 2.0 * params.radius_scale).min(120.0);
    let one = Complex64::new(1.0, 0.0);
    let du = cu.distance_to(one).min(cu.distance_to(-one)).max(1e-3);
    let dv = cv.distance_to(one).min(cv.distance_to(-one)).max(1e-3);
    let sing = [du, dv];

    let t0 = piece_series(
        &cu,
        &cv,
        sing,
        f2,
        &ladder,
        params,
        0.0,
        |n| (n, n),
        |n| if n % 2 == 1 { 1.0 } else { -1.0 },
        |n| -2.0 * ln_factorial(n),
        |u| (u - one) / (u + one),
        |v| (v + one) / (v - one),
        1,
    )?;
    let t1 = piece_series(
        &cu,
        &cv,
        sing,
        f2,
        &ladder,
        params,
        LN_2 + tau / 3.0 - alpha - beta,
        |n| (n, n - 1),
        |n| if n % 2 == 1 { -1.0 } else { 1.0 },
        |n| -2.0 * ln_factorial(n - 1) - (n as f64).ln(),
        |u| one / ((u - one) * (u + one)),
        |v| (v - one) * (v + one),
        1,
    )?;
    let tm1 = piece_series(
        &cu,
        &cv,
        sing,
        f2,
        &ladder,
        params,
        LN_2 + tau / 3.0 + alpha - beta,
        |n| (n - 1, n),
        |n| if n % 2 == 1 { -1.0 } else { 1.0 },
        |n| -2.0 * ln_factorial(n - 1) - (n as f64).ln(),
        |u| (u - one) * (u + one),
        |v| one / ((v - one) * (v + one)),
        1,
    )?;
    let t2_remainder = piece_series(
        &cu,
        &cv,
        sing,
        f2,
        &ladder,
        params,
        2.0 * tau / 3.0 - 2.0 * beta,
        |n| (n - 1, n - 1),
        |n| if n % 2 == 1 { -1.0 } else { 1.0 },
        |n| -2.0 * ln_factorial(n - 1),
        |u| (u + one) / (u - one),
        |v| (v - one) / (v + one),
        2,
    )?;
    Ok(M2Decomposition {
        t0,
        t1,
        tm1,
        t2_remainder,
    })
}

/// Leading-order closed form of the two-point tail difference
/// T(0, β; (0,0), (α,τ)) − exp((2/3)τ − 2β) for large β; relative accuracy
/// O(β^{−3/4}). The α = 0 branch carries twice the prefactor of any α ≠ 0;
/// the α → 0 limit of the latter is half the former.
pub fn tail_asymptote(beta: f64, alpha: f64, tau: f64) -> f64 {
    assert!(beta > 0.0 && tau > 0.0, "tail asymptote needs beta, tau > 0");
    let a = alpha.abs();
    if alpha == 0.0 {
        -(2.0 * tau.powf(0.75) / (PI.sqrt() * beta.powf(1.25)))
            * (-(2.0 / 3.0) * beta.powf(1.5) / tau.sqrt() + tau / 3.0 - beta).exp()
    } else {
        -(tau.powf(0.75) / (PI.sqrt() * beta.powf(1.25)))
            * (-(2.0 / 3.0) * (beta + a * a / tau).powf(1.5) / tau.sqrt()
                + a * (beta / tau - 1.0 + 2.0 * a * a / (3.0 * tau * tau))
                + tau / 3.0
                - beta)
                .exp()
    }
}
