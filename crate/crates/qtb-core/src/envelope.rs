//! Primitive sensitivity maps and their nested composition.
//!
//! The internal-validity layer bounds the inverse treatment-selection tilt by
//! `[l_gamma(e), u_gamma(e)]`; the external-validity layer bounds the
//! source-to-target outcome tilt by `[1/lambda, lambda]`. Each layer turns an
//! event probability into a max/min of two affine pieces, and the sharp
//! target bound is the composition of the two layers. This module evaluates
//! those maps, the single-tilt product relaxation they dominate, the active
//! affine branches, and the (directional) derivatives used by the influence
//! function machinery.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance for clamping probabilities onto `[0, 1]`.
pub const BOUNDARY_TOL: f64 = 1e-12;

/// Absolute tolerance on the margin between affine pieces before a branch is
/// declared tied.
pub const TIE_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum EnvelopeError {
    #[error("sensitivity parameter {name} must be finite and >= 1, got {value}")]
    InvalidSensitivity { name: &'static str, value: f64 },
    #[error("probability {value} outside [0, 1] beyond tolerance {BOUNDARY_TOL}")]
    OutOfUnitInterval { value: f64 },
}

/// A branch of a two-piece envelope is tied; two-sided derivatives do not
/// exist and callers must switch to [`directional_derivative`].
#[derive(Debug, Error, Clone, Copy, PartialEq)]
#[error("tied affine pieces in the {layer} layer (margin {margin:.3e})")]
pub struct TieError {
    pub layer: Layer,
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Source,
    Transport,
}

impl std::fmt::Display for Layer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Layer::Source => write!(f, "source"),
            Layer::Transport => write!(f, "transport"),
        }
    }
}

/// The sensitivity pair `s = (gamma, lambda)`, both at least one.
///
/// `gamma` bounds the treatment-selection odds ratio in the source study;
/// `lambda` bounds the source-to-target outcome likelihood ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPair {
    gamma: f64,
    lambda: f64,
}

impl SensitivityPair {
    pub fn new(gamma: f64, lambda: f64) -> Result<Self, EnvelopeError> {
        if !gamma.is_finite() || gamma < 1.0 {
            return Err(EnvelopeError::InvalidSensitivity { name: "gamma", value: gamma });
        }
        if !lambda.is_finite() || lambda < 1.0 {
            return Err(EnvelopeError::InvalidSensitivity { name: "lambda", value: lambda });
        }
        Ok(Self { gamma, lambda })
    }

    /// The point-identified corner `(1, 1)`.
    pub fn point_identified() -> Self {
        Self { gamma: 1.0, lambda: 1.0 }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Componentwise order: `self <= other` in both coordinates.
    pub fn is_weaker_than(&self, other: &SensitivityPair) -> bool {
        self.gamma <= other.gamma && self.lambda <= other.lambda
    }
}

/// A probability validated into `[0, 1]`.
///
/// Values within [`BOUNDARY_TOL`] of the boundary are clamped; values further
/// outside are rejected.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct UnitProb(f64);

impl UnitProb {
    pub fn new(value: f64) -> Result<Self, EnvelopeError> {
        if !value.is_finite() || !(-BOUNDARY_TOL..=1.0 + BOUNDARY_TOL).contains(&value) {
            return Err(EnvelopeError::OutOfUnitInterval { value });
        }
        Ok(Self(value.clamp(0.0, 1.0)))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Which envelope endpoint is evaluated: lower (`-`) or upper (`+`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Lower,
    Upper,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Lower, Side::Upper];

    pub fn index(self) -> usize {
        match self {
            Side::Lower => 0,
            Side::Upper => 1,
        }
    }
}

/// Which affine piece attains the max/min in a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Piece1,
    Piece2,
    Tie,
}

/// Active pieces in both layers, with the absolute margins between pieces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveBranches {
    pub c_branch: Branch,
    pub t_branch: Branch,
    pub c_margin: f64,
    pub t_margin: f64,
}

impl ActiveBranches {
    pub fn is_regular(&self) -> bool {
        self.c_branch != Branch::Tie && self.t_branch != Branch::Tie
    }
}

/// Partial derivatives of the nested map on a fixed active branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeDerivatives {
    /// d G / d p; nonnegative because the nested map is nondecreasing in p.
    pub d_p: f64,
    /// d G / d e.
    pub d_e: f64,
}

/// Inverse-selection tilt bounds `(l_gamma(e), u_gamma(e))`.
///
/// `l = e + (1 - e) / gamma` and `u = e + gamma (1 - e)`, so `0 < l <= 1 <= u`
/// for `e` in `[0, 1]` and `gamma >= 1`.
pub fn ell_u(e: f64, gamma: f64) -> (f64, f64) {
    (e + (1.0 - e) / gamma, e + gamma * (1.0 - e))
}

pub(crate) fn c_envelope_raw(p: f64, e: f64, gamma: f64, side: Side) -> f64 {
    if gamma == 1.0 {
        return p; // exact identity reduction
    }
    let (ell, u) = ell_u(e, gamma);
    match side {
        Side::Lower => (ell * p).max(1.0 - u * (1.0 - p)),
        Side::Upper => (u * p).min(1.0 - ell * (1.0 - p)),
    }
}

pub(crate) fn t_envelope_raw(q: f64, lambda: f64, side: Side) -> f64 {
    if lambda == 1.0 {
        return q; // exact identity reduction
    }
    match side {
        Side::Lower => (q / lambda).max(1.0 - lambda * (1.0 - q)),
        Side::Upper => (lambda * q).min(1.0 - (1.0 - q) / lambda),
    }
}

pub(crate) fn g_nested_raw(p: f64, e: f64, gamma: f64, lambda: f64, side: Side) -> f64 {
    t_envelope_raw(c_envelope_raw(p, e, gamma, side), lambda, side)
}

/// Source-layer envelope `C^sigma_gamma(p, e)`.
pub fn c_envelope(p: UnitProb, e: UnitProb, gamma: f64, side: Side) -> UnitProb {
    UnitProb(c_envelope_raw(p.value(), e.value(), gamma, side).clamp(0.0, 1.0))
}

/// Transport-layer envelope `T^sigma_lambda(q)`.
pub fn t_envelope(q: UnitProb, lambda: f64, side: Side) -> UnitProb {
    UnitProb(t_envelope_raw(q.value(), lambda, side).clamp(0.0, 1.0))
}

/// Nested endpoint map `G^sigma_s(p, e) = T^sigma_lambda(C^sigma_gamma(p, e))`.
pub fn g_nested(p: UnitProb, e: UnitProb, s: SensitivityPair, side: Side) -> UnitProb {
    UnitProb(g_nested_raw(p.value(), e.value(), s.gamma, s.lambda, side).clamp(0.0, 1.0))
}

pub(crate) fn product_relaxation_raw(p: f64, e: f64, gamma: f64, lambda: f64, side: Side) -> f64 {
    let (ell, u) = ell_u(e, gamma);
    match side {
        Side::Lower => (ell * p / lambda).max(1.0 - u * lambda * (1.0 - p)),
        Side::Upper => (u * lambda * p).min(1.0 - ell * (1.0 - p) / lambda),
    }
}

/// Single product-tilt comparator with bounds `[l/lambda, u*lambda]`.
///
/// Always at least as loose as the nested map: product lower <= nested lower
/// and nested upper <= product upper, strictly on a nonempty set.
pub fn product_relaxation(p: UnitProb, e: UnitProb, s: SensitivityPair, side: Side) -> UnitProb {
    let v = product_relaxation_raw(p.value(), e.value(), s.gamma, s.lambda, side);
    UnitProb(v.clamp(0.0, 1.0))
}

fn classify_two(piece1: f64, piece2: f64, take_max: bool) -> (Branch, f64) {
    let margin = (piece1 - piece2).abs();
    if margin <= TIE_TOL {
        return (Branch::Tie, margin);
    }
    let first_wins = if take_max { piece1 > piece2 } else { piece1 < piece2 };
    (if first_wins { Branch::Piece1 } else { Branch::Piece2 }, margin)
}

/// Identify the active affine piece in each layer.
///
/// The source layer ties exactly at `p = gamma/(gamma+1)` (lower side) or
/// `p = 1/(gamma+1)` (upper side), independent of `e`; the transport layer at
/// `q = lambda/(lambda+1)` or `q = 1/(lambda+1)`. Degenerate layers
/// (`gamma = 1` or `lambda = 1`) are tied everywhere.
pub fn classify_branches(
    p: UnitProb,
    e: UnitProb,
    s: SensitivityPair,
    side: Side,
) -> ActiveBranches {
    let (p, e) = (p.value(), e.value());
    let (ell, u) = ell_u(e, s.gamma);
    let take_max = side == Side::Lower;
    let (c1, c2) = match side {
        Side::Lower => (ell * p, 1.0 - u * (1.0 - p)),
        Side::Upper => (u * p, 1.0 - ell * (1.0 - p)),
    };
    let (c_branch, c_margin) = classify_two(c1, c2, take_max);
    let q = c_envelope_raw(p, e, s.gamma, side);
    let (t1, t2) = match side {
        Side::Lower => (q / s.lambda, 1.0 - s.lambda * (1.0 - q)),
        Side::Upper => (s.lambda * q, 1.0 - (1.0 - q) / s.lambda),
    };
    let (t_branch, t_margin) = classify_two(t1, t2, take_max);
    ActiveBranches { c_branch, t_branch, c_margin, t_margin }
}

/// Source-piece partials `(d/dp, d/de)` on a fixed branch.
///
/// Derivative table: `l' = 1 - 1/gamma`, `u' = 1 - gamma`, and
/// lower: piece1 `(l, l'p)`, piece2 `(u, -u'(1-p))`;
/// upper: piece1 `(u, u'p)`, piece2 `(l, -l'(1-p))`.
fn c_piece_partials(p: f64, e: f64, gamma: f64, side: Side, branch: Branch) -> (f64, f64) {
    let (ell, u) = ell_u(e, gamma);
    let dell = 1.0 - 1.0 / gamma;
    let du = 1.0 - gamma;
    match (side, branch) {
        (Side::Lower, Branch::Piece1) => (ell, dell * p),
        (Side::Lower, Branch::Piece2) => (u, -du * (1.0 - p)),
        (Side::Upper, Branch::Piece1) => (u, du * p),
        (Side::Upper, Branch::Piece2) => (ell, -dell * (1.0 - p)),
        (_, Branch::Tie) => unreachable!("tie handled by caller"),
    }
}

/// Transport-piece slope on a fixed branch: lower `(1/lambda, lambda)`,
/// upper `(lambda, 1/lambda)` for pieces 1 and 2.
fn t_piece_slope(lambda: f64, side: Side, branch: Branch) -> f64 {
    match (side, branch) {
        (Side::Lower, Branch::Piece1) | (Side::Upper, Branch::Piece2) => 1.0 / lambda,
        (Side::Lower, Branch::Piece2) | (Side::Upper, Branch::Piece1) => lambda,
        (_, Branch::Tie) => unreachable!("tie handled by caller"),
    }
}

/// Two-sided partial derivatives of the nested map by the chain rule.
///
/// A degenerate layer (`gamma = 1` or `lambda = 1`) is simplified to the
/// identity before differentiation, so the point-identified corner yields
/// `d_p = 1`, `d_e = 0` instead of a tie. A genuine tie in a nondegenerate
/// layer is a [`TieError`].
pub fn envelope_derivatives(
    p: UnitProb,
    e: UnitProb,
    s: SensitivityPair,
    side: Side,
) -> Result<EnvelopeDerivatives, TieError> {
    let branches = classify_branches(p, e, s, side);
    let (c_dp, c_de) = if s.gamma == 1.0 {
        (1.0, 0.0)
    } else {
        if branches.c_branch == Branch::Tie {
            return Err(TieError { layer: Layer::Source, margin: branches.c_margin });
        }
        c_piece_partials(p.value(), e.value(), s.gamma, side, branches.c_branch)
    };
    let slope = if s.lambda == 1.0 {
        1.0
    } else {
        if branches.t_branch == Branch::Tie {
            return Err(TieError { layer: Layer::Transport, margin: branches.t_margin });
        }
        t_piece_slope(s.lambda, side, branches.t_branch)
    };
    Ok(EnvelopeDerivatives { d_p: slope * c_dp, d_e: slope * c_de })
}

/// Piecewise-affine description of `p -> G^sigma_s(p, e)` for fixed
/// `(e, s, side)`: at most three regions in `p` split by the source switch
/// and the transport switch pulled back through the source layer. Estimator
/// hot loops scan a sorted sequence of `p` values and advance the region
/// pointer instead of re-classifying every point.
#[derive(Debug, Clone)]
pub(crate) struct EnvelopeProfile {
    n_breaks: usize,
    breaks: [f64; 2],
    /// Half-width in `p` of the tie region around each break, converting the
    /// value-margin tolerance [`TIE_TOL`] to `p`-space.
    tie_radius: [f64; 2],
    /// Region coefficients: `G = g0 + g1 p`, `dG/dp = g1`,
    /// `dG/de = ge0 + ge1 p`.
    g0: [f64; 3],
    g1: [f64; 3],
    ge0: [f64; 3],
    ge1: [f64; 3],
}

impl EnvelopeProfile {
    pub(crate) fn build(e: f64, s: SensitivityPair, side: Side) -> Self {
        let (ell, u) = ell_u(e, s.gamma);
        let dell = 1.0 - 1.0 / s.gamma;
        let du = 1.0 - s.gamma;
        // Source layer: two affine pieces (c0 + c1 p) with e-partials
        // (ce0 + ce1 p); piece 1 is active left of the switch.
        let (c_pieces, c_epieces, p_star) = match side {
            Side::Lower => (
                [(0.0, ell), (1.0 - u, u)],
                [(0.0, dell), (-du, du)],
                s.gamma / (s.gamma + 1.0),
            ),
            Side::Upper => (
                [(0.0, u), (1.0 - ell, ell)],
                [(0.0, du), (-dell, dell)],
                1.0 / (s.gamma + 1.0),
            ),
        };
        // Transport layer: slopes and intercepts (t = t0 + t1 q), piece 1
        // left of the q switch.
        let (t_pieces, q_star) = match side {
            Side::Lower => (
                [(0.0, 1.0 / s.lambda), (1.0 - s.lambda, s.lambda)],
                s.lambda / (s.lambda + 1.0),
            ),
            Side::Upper => (
                [(0.0, s.lambda), (1.0 - 1.0 / s.lambda, 1.0 / s.lambda)],
                1.0 / (s.lambda + 1.0),
            ),
        };

        let c_degenerate = s.gamma == 1.0;
        let t_degenerate = s.lambda == 1.0;

        // Candidate breaks in p-space with their tie radii (fixed-size: this
        // constructor runs inside estimator hot loops).
        let mut cuts = [(0.0_f64, 0.0_f64); 2];
        let mut n_cuts = 0;
        if !c_degenerate {
            cuts[n_cuts] = (p_star, TIE_TOL / (u - ell));
            n_cuts += 1;
        }
        if !t_degenerate {
            // Map the q switch back through the source layer: q(p) is
            // continuous and nondecreasing from 0 to 1, so the crossing sits
            // in whichever source piece straddles q_star.
            let (c_slope_at, p_at_qstar) = if c_degenerate {
                (1.0, q_star)
            } else {
                let q_at_pstar = c_pieces[0].0 + c_pieces[0].1 * p_star;
                let piece = usize::from(q_star > q_at_pstar);
                let (c0, c1) = c_pieces[piece];
                (c1, (q_star - c0) / c1)
            };
            let t_scale = s.lambda - 1.0 / s.lambda;
            cuts[n_cuts] = (p_at_qstar, TIE_TOL / (t_scale * c_slope_at));
            n_cuts += 1;
        }
        if n_cuts == 2 && cuts[0].0 > cuts[1].0 {
            cuts.swap(0, 1);
        }

        let mut profile = EnvelopeProfile {
            n_breaks: n_cuts,
            breaks: [f64::INFINITY; 2],
            tie_radius: [0.0; 2],
            g0: [0.0; 3],
            g1: [0.0; 3],
            ge0: [0.0; 3],
            ge1: [0.0; 3],
        };
        for (i, (b, r)) in cuts.iter().take(n_cuts).enumerate() {
            profile.breaks[i] = *b;
            profile.tie_radius[i] = *r;
        }
        // Compose coefficients per region, probing each region's midpoint to
        // select the active pieces.
        let mut edges = [0.0; 4];
        for i in 0..n_cuts {
            edges[i + 1] = cuts[i].0;
        }
        edges[n_cuts + 1] = 1.0;
        for region in 0..=n_cuts {
            let lo = edges[region].clamp(0.0, 1.0);
            let hi = edges[region + 1].clamp(0.0, 1.0);
            let mid = 0.5 * (lo + hi);
            let (c0, c1, ce0, ce1) = if c_degenerate {
                (0.0, 1.0, 0.0, 0.0)
            } else {
                let piece = usize::from(mid > p_star);
                let (c0, c1) = c_pieces[piece];
                let (ce0, ce1) = c_epieces[piece];
                (c0, c1, ce0, ce1)
            };
            let q_mid = c0 + c1 * mid;
            let (t0, t1) = if t_degenerate {
                (0.0, 1.0)
            } else {
                t_pieces[usize::from(q_mid > q_star)]
            };
            profile.g0[region] = t0 + t1 * c0;
            profile.g1[region] = t1 * c1;
            profile.ge0[region] = t1 * ce0;
            profile.ge1[region] = t1 * ce1;
        }
        profile
    }

    #[inline]
    pub(crate) fn n_breaks(&self) -> usize {
        self.n_breaks
    }

    #[inline]
    pub(crate) fn break_at(&self, i: usize) -> f64 {
        self.breaks[i]
    }

    /// Region index for `p`; exact switch points belong to the left region,
    /// matching the first-piece tie convention.
    #[inline]
    pub(crate) fn region_of(&self, p: f64) -> usize {
        let mut r = 0;
        while r < self.n_breaks && p > self.breaks[r] {
            r += 1;
        }
        r
    }

    /// `(G, dG/dp, dG/de)` in the given region.
    #[inline]
    pub(crate) fn eval(&self, region: usize, p: f64) -> (f64, f64, f64) {
        (
            self.g0[region] + self.g1[region] * p,
            self.g1[region],
            self.ge0[region] + self.ge1[region] * p,
        )
    }

    /// True when `p` lies within the tie tolerance of a switch.
    #[inline]
    pub(crate) fn near_tie(&self, p: f64) -> bool {
        (0..self.n_breaks).any(|i| (p - self.breaks[i]).abs() <= self.tie_radius[i])
    }
}

/// Hadamard directional derivative of the nested map in direction
/// `(h_p, h_e)`.
///
/// The inner layer takes the max (lower side) or min (upper side) of the
/// linearized increment over its active pieces; the outer layer does the same
/// over its active slopes applied to the inner value. At branch-regular
/// points this reduces to `d_p h_p + d_e h_e`.
pub fn directional_derivative(
    p: UnitProb,
    e: UnitProb,
    s: SensitivityPair,
    side: Side,
    h_p: f64,
    h_e: f64,
) -> f64 {
    let branches = classify_branches(p, e, s, side);
    let take_max = side == Side::Lower;
    let extremize = |a: f64, b: f64| if take_max { a.max(b) } else { a.min(b) };

    let piece_increment = |branch: Branch| {
        let (dp, de) = c_piece_partials(p.value(), e.value(), s.gamma, side, branch);
        dp * h_p + de * h_e
    };
    let inner = match branches.c_branch {
        Branch::Tie => extremize(piece_increment(Branch::Piece1), piece_increment(Branch::Piece2)),
        b => piece_increment(b),
    };

    match branches.t_branch {
        Branch::Tie => extremize(
            t_piece_slope(s.lambda, side, Branch::Piece1) * inner,
            t_piece_slope(s.lambda, side, Branch::Piece2) * inner,
        ),
        b => t_piece_slope(s.lambda, side, b) * inner,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn up(v: f64) -> UnitProb {
        UnitProb::new(v).unwrap()
    }

    fn s(gamma: f64, lambda: f64) -> SensitivityPair {
        SensitivityPair::new(gamma, lambda).unwrap()
    }

    /// Central finite difference of the nested map, used as an independent
    /// oracle for the derivative table.
    fn fd_derivatives(p: f64, e: f64, sp: SensitivityPair, side: Side, step: f64) -> (f64, f64) {
        let g = |p: f64, e: f64| g_nested_raw(p, e, sp.gamma(), sp.lambda(), side);
        let d_p = (g(p + step, e) - g(p - step, e)) / (2.0 * step);
        let d_e = (g(p, e + step) - g(p, e - step)) / (2.0 * step);
        (d_p, d_e)
    }

    #[test]
    fn sensitivity_pair_rejects_invalid() {
        assert!(SensitivityPair::new(0.99, 1.0).is_err());
        assert!(SensitivityPair::new(1.0, f64::NAN).is_err());
        assert!(SensitivityPair::new(1.0, 0.0).is_err());
        assert!(SensitivityPair::new(1.0, 1.0).is_ok());
    }

    #[test]
    fn unit_prob_clamps_within_tolerance() {
        assert_eq!(UnitProb::new(-0.5e-12).unwrap().value(), 0.0);
        assert_eq!(UnitProb::new(1.0 + 0.5e-12).unwrap().value(), 1.0);
        assert!(UnitProb::new(-1e-9).is_err());
        assert!(UnitProb::new(1.0 + 1e-9).is_err());
    }

    #[test]
    fn ell_u_worked_example() {
        // Values from the non-collapse worked example.
        let (ell, u) = ell_u(0.1, 2.0);
        assert_abs_diff_eq!(ell, 0.55, epsilon = 1e-15);
        assert_abs_diff_eq!(u, 1.9, epsilon = 1e-15);
    }

    #[test]
    fn ell_u_collapses_at_gamma_one() {
        let (ell, u) = ell_u(0.3, 1.0);
        assert_eq!(ell, 1.0);
        assert_eq!(u, 1.0);
    }

    #[test]
    fn ell_u_second_route() {
        // Independent algebraic route: l = (1 + (gamma-1) e) / gamma and
        // u = gamma - (gamma-1) e.
        let (ell, u) = ell_u(0.5, 3.0);
        assert_abs_diff_eq!(ell, (1.0 + 2.0 * 0.5) / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(u, 3.0 - 2.0 * 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(ell, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(u, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn c_envelope_worked_example() {
        let v = c_envelope(up(0.7), up(0.1), 2.0, Side::Lower);
        assert_abs_diff_eq!(v.value(), 0.43, epsilon = 1e-12);
        // Upper endpoint: min{1.9*0.7, 1 - 0.55*0.3}; cross-checked against
        // the single-layer LP in the lp module tests.
        let v = c_envelope(up(0.7), up(0.1), 2.0, Side::Upper);
        assert_abs_diff_eq!(v.value(), 0.835, epsilon = 1e-12);
    }

    #[test]
    fn c_envelope_identity_at_gamma_one() {
        for side in Side::BOTH {
            let v = c_envelope(up(0.7), up(0.1), 1.0, side);
            assert_eq!(v.value(), 0.7);
        }
    }

    #[test]
    fn t_envelope_worked_example() {
        let v = t_envelope(up(0.43), 1.5, Side::Lower);
        assert_abs_diff_eq!(v.value(), 0.43 / 1.5, epsilon = 1e-12);
        for side in Side::BOTH {
            assert_eq!(t_envelope(up(0.9), 1.0, side).value(), 0.9);
        }
        assert_eq!(t_envelope(up(0.0), 4.0, Side::Upper).value(), 0.0);
    }

    #[test]
    fn nested_lower_worked_example() {
        let v = g_nested(up(0.7), up(0.1), s(2.0, 1.5), Side::Lower);
        assert_abs_diff_eq!(v.value(), 0.43 / 1.5, epsilon = 1e-12);
        // 0.43/1.5 = 0.2866...
        assert_abs_diff_eq!(v.value(), 0.286_666_666_666_666_7, epsilon = 1e-12);
    }

    #[test]
    fn product_relaxation_worked_example() {
        let v = product_relaxation(up(0.7), up(0.1), s(2.0, 1.5), Side::Lower);
        // max{0.55*0.7/1.5, 1 - 1.9*1.5*0.3} = max{0.2566..., 0.145}
        assert_abs_diff_eq!(v.value(), 0.55 * 0.7 / 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(v.value(), 0.256_666_666_666_666_7, epsilon = 1e-12);
    }

    #[test]
    fn product_relaxation_second_case() {
        // (p=0.5, e=0.3, gamma=2, lambda=2): l=0.65, u=1.7, so the lower
        // product endpoint is max{0.65*0.5/2, 1-3.4*0.5} = 0.1625. Frozen
        // from the single-layer LP oracle (see lp module tests).
        let v = product_relaxation(up(0.5), up(0.3), s(2.0, 2.0), Side::Lower);
        assert_abs_diff_eq!(v.value(), 0.1625, epsilon = 1e-12);
    }

    #[test]
    fn classify_tie_on_switch_surface() {
        // Lower source switch surface p = gamma/(gamma+1), independent of e.
        let b = classify_branches(up(2.0 / 3.0), up(0.4), s(2.0, 1.5), Side::Lower);
        assert_eq!(b.c_branch, Branch::Tie);
    }

    #[test]
    fn classify_regular_points() {
        let b = classify_branches(up(0.2), up(0.1), s(2.0, 1.5), Side::Lower);
        assert_eq!(b.c_branch, Branch::Piece1); // 0.11 vs -0.52
        assert_eq!(b.t_branch, Branch::Piece1); // 0.0733... vs -0.335
        assert!(b.c_margin > 0.6 && b.t_margin > 0.4);

        let b = classify_branches(up(0.99), up(0.5), s(4.0, 1.1), Side::Lower);
        assert_eq!(b.c_branch, Branch::Piece2); // 0.61875 vs 0.975
    }

    #[test]
    fn derivatives_worked_example() {
        let d = envelope_derivatives(up(0.2), up(0.1), s(2.0, 1.5), Side::Lower).unwrap();
        assert_abs_diff_eq!(d.d_p, 0.55 / 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(d.d_e, 0.5 * 0.2 / 1.5, epsilon = 1e-12);
        let (fd_p, fd_e) = fd_derivatives(0.2, 0.1, s(2.0, 1.5), Side::Lower, 1e-6);
        assert_abs_diff_eq!(d.d_p, fd_p, epsilon = 1e-6);
        assert_abs_diff_eq!(d.d_e, fd_e, epsilon = 1e-6);
    }

    #[test]
    fn derivatives_upper_both_piece2() {
        let d = envelope_derivatives(up(0.9), up(0.5), s(3.0, 2.0), Side::Upper).unwrap();
        let (ell, _) = ell_u(0.5, 3.0);
        let dell = 1.0 - 1.0 / 3.0;
        assert_abs_diff_eq!(d.d_p, ell / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.d_e, -dell * 0.1 / 2.0, epsilon = 1e-12);
        let (fd_p, fd_e) = fd_derivatives(0.9, 0.5, s(3.0, 2.0), Side::Upper, 1e-6);
        assert_abs_diff_eq!(d.d_p, fd_p, epsilon = 1e-6);
        assert_abs_diff_eq!(d.d_e, fd_e, epsilon = 1e-6);
    }

    #[test]
    fn derivatives_tie_is_error() {
        let err = envelope_derivatives(up(2.0 / 3.0), up(0.4), s(2.0, 1.5), Side::Lower)
            .unwrap_err();
        assert_eq!(err.layer, Layer::Source);
    }

    #[test]
    fn derivatives_point_identified_reduction() {
        // Degenerate layers simplify to the identity before differentiation.
        let d = envelope_derivatives(up(0.37), up(0.6), s(1.0, 1.0), Side::Lower).unwrap();
        assert_eq!(d.d_p, 1.0);
        assert_eq!(d.d_e, 0.0);
    }

    #[test]
    fn directional_matches_one_sided_difference_at_tie() {
        // Source tie at p = 2/3 with direction (1, 0): the forward difference
        // picks the steeper lower piece u, scaled by the active slope 1/1.5.
        let sp = s(2.0, 1.5);
        let v = directional_derivative(up(2.0 / 3.0), up(0.4), sp, Side::Lower, 1.0, 0.0);
        let (_, u) = ell_u(0.4, 2.0);
        assert_abs_diff_eq!(v, u / 1.5, epsilon = 1e-12);
        let t = 1e-7;
        let fd = (g_nested_raw(2.0 / 3.0 + t, 0.4, 2.0, 1.5, Side::Lower)
            - g_nested_raw(2.0 / 3.0, 0.4, 2.0, 1.5, Side::Lower))
            / t;
        assert_abs_diff_eq!(v, fd, epsilon = 1e-5);
    }

    #[test]
    fn directional_zero_direction() {
        let v = directional_derivative(up(2.0 / 3.0), up(0.4), s(2.0, 1.5), Side::Lower, 0.0, 0.0);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn directional_equals_gradient_at_regular_points() {
        let sp = s(2.0, 1.5);
        let (p, e) = (0.2, 0.1);
        let d = envelope_derivatives(up(p), up(e), sp, Side::Lower).unwrap();
        for (hp, he) in [(1.0, 0.0), (0.0, 1.0), (0.3, -0.7), (-1.0, 2.0)] {
            let v = directional_derivative(up(p), up(e), sp, Side::Lower, hp, he);
            assert_abs_diff_eq!(v, d.d_p * hp + d.d_e * he, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn coherence_and_monotonicity(
            p1 in 0.0f64..=1.0,
            p2 in 0.0f64..=1.0,
            e in 0.001f64..=0.999,
            gamma in 1.0f64..8.0,
            lambda in 1.0f64..8.0,
        ) {
            let sp = s(gamma, lambda);
            let (lo, hi) = (p1.min(p2), p1.max(p2));
            for side in Side::BOTH {
                let a = g_nested(up(lo), up(e), sp, side).value();
                let b = g_nested(up(hi), up(e), sp, side).value();
                prop_assert!(a <= b + 1e-12);
            }
            let lower = g_nested(up(p1), up(e), sp, Side::Lower).value();
            let upper = g_nested(up(p1), up(e), sp, Side::Upper).value();
            prop_assert!(lower <= upper + 1e-12);
            // Endpoint preservation is exact.
            prop_assert_eq!(g_nested(up(0.0), up(e), sp, Side::Lower).value(), 0.0);
            prop_assert_eq!(g_nested(up(1.0), up(e), sp, Side::Lower).value(), 1.0);
            prop_assert_eq!(g_nested(up(0.0), up(e), sp, Side::Upper).value(), 0.0);
            prop_assert_eq!(g_nested(up(1.0), up(e), sp, Side::Upper).value(), 1.0);
        }

        #[test]
        fn product_dominance(
            p in 0.0f64..=1.0,
            e in 0.001f64..=0.999,
            gamma in 1.0f64..8.0,
            lambda in 1.0f64..8.0,
        ) {
            let sp = s(gamma, lambda);
            let nested_lo = g_nested(up(p), up(e), sp, Side::Lower).value();
            let nested_hi = g_nested(up(p), up(e), sp, Side::Upper).value();
            let prod_lo = product_relaxation(up(p), up(e), sp, Side::Lower).value();
            let prod_hi = product_relaxation(up(p), up(e), sp, Side::Upper).value();
            prop_assert!(prod_lo <= nested_lo + 1e-12);
            prop_assert!(nested_hi <= prod_hi + 1e-12);
        }

        #[test]
        fn reduction_identities(p in 0.0f64..=1.0, e in 0.0f64..=1.0, g in 1.0f64..8.0) {
            for side in Side::BOTH {
                prop_assert_eq!(c_envelope(up(p), up(e), 1.0, side).value(), p);
                prop_assert_eq!(t_envelope(up(p), 1.0, side).value(), p);
                prop_assert_eq!(g_nested(up(p), up(e), s(1.0, 1.0), side).value(), p);
                // One degenerate layer leaves the other intact.
                let left = g_nested(up(p), up(e), s(g, 1.0), side).value();
                prop_assert_eq!(left, c_envelope(up(p), up(e), g, side).value());
                let right = g_nested(up(p), up(e), s(1.0, g), side).value();
                prop_assert_eq!(right, t_envelope(up(p), g, side).value());
            }
        }

        #[test]
        fn derivatives_match_finite_differences(
            p in 0.01f64..=0.99,
            e in 0.05f64..=0.95,
            gamma in 1.05f64..6.0,
            lambda in 1.05f64..6.0,
        ) {
            let sp = s(gamma, lambda);
            for side in Side::BOTH {
                let b = classify_branches(up(p), up(e), sp, side);
                // Skip near-switch points; FD straddles the kink there.
                if b.c_margin < 1e-4 || b.t_margin < 1e-4 {
                    continue;
                }
                let d = envelope_derivatives(up(p), up(e), sp, side).unwrap();
                let (fd_p, fd_e) = fd_derivatives(p, e, sp, side, 1e-6);
                prop_assert!((d.d_p - fd_p).abs() < 1e-6);
                prop_assert!((d.d_e - fd_e).abs() < 1e-6);
                prop_assert!(d.d_p >= 0.0);
            }
        }

        #[test]
        fn profile_matches_direct_maps(
            p in 0.0f64..=1.0,
            e in 0.05f64..=0.95,
            gamma in 1.0f64..6.0,
            lambda in 1.0f64..4.0,
        ) {
            let sp = s(gamma, lambda);
            for side in Side::BOTH {
                let profile = EnvelopeProfile::build(e, sp, side);
                let region = profile.region_of(p);
                let (g, gp, ge) = profile.eval(region, p);
                let want = g_nested_raw(p, e, gamma, lambda, side);
                prop_assert!((g - want).abs() < 1e-12, "value {g} vs {want}");
                // Derivatives agree with the two-sided table away from ties;
                // inside the tie band only the value is pinned down.
                if !profile.near_tie(p) {
                    let d = envelope_derivatives(up(p), up(e), sp, side).unwrap();
                    prop_assert!((gp - d.d_p).abs() < 1e-10, "gp {gp} vs {}", d.d_p);
                    prop_assert!((ge - d.d_e).abs() < 1e-10, "ge {ge} vs {}", d.d_e);
                    let b = classify_branches(up(p), up(e), sp, side);
                    prop_assert!(b.is_regular() || gamma == 1.0 || lambda == 1.0);
                }
            }
        }

        #[test]
        fn directional_positively_homogeneous(
            p in 0.0f64..=1.0,
            e in 0.05f64..=0.95,
            gamma in 1.0f64..6.0,
            lambda in 1.0f64..6.0,
            hp in -2.0f64..2.0,
            he in -2.0f64..2.0,
            c in 0.0f64..5.0,
        ) {
            let sp = s(gamma, lambda);
            for side in Side::BOTH {
                let v = directional_derivative(up(p), up(e), sp, side, hp, he);
                let w = directional_derivative(up(p), up(e), sp, side, c * hp, c * he);
                prop_assert!((w - c * v).abs() <= 1e-9 * (1.0 + v.abs() * c));
            }
        }
    }
}
