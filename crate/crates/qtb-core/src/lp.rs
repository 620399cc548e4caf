//! Exact finite-support linear programs auditing the closed-form envelopes.
//!
//! The closed forms in [`crate::envelope`] claim to solve two constrained
//! optimization problems: a single bounded normalized tilt (one layer) and
//! the two-layer program with an intermediate normalization. This module
//! solves those programs directly with a dense bounded-variable simplex, plus
//! a fractional-greedy construction exploiting the box-plus-one-equality
//! structure, so the algebra can be checked against optimizers that share no
//! code with it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::FiniteDist;
use crate::envelope::{ell_u, SensitivityPair, Side, UnitProb};
use crate::simplex::{self, Problem, Relation, Row};

pub use crate::simplex::SimplexError;

#[derive(Debug, Error)]
pub enum LpError {
    #[error("tilt bounds must satisfy 0 < ell <= 1 <= u, got ell={ell}, u={u}")]
    Domain { ell: f64, u: f64 },
    #[error("e must lie strictly inside (0, 1), got {0}")]
    DegeneratePropensity(f64),
    #[error("LP solver failed: {0}")]
    Solver(#[from] SimplexError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
}

/// Optimum of an audit program with its primal certificate.
///
/// `q_vars` holds the source-layer probabilities (empty for single-layer
/// programs) and `t_vars` the target-layer probabilities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LpSolution {
    pub value: f64,
    pub q_vars: Vec<f64>,
    pub t_vars: Vec<f64>,
    pub status: LpStatus,
}

/// Feasible interval for `E(hZ)` over tilts `h` in `[ell, u]` with `E(h)=1`,
/// where `Z` is a binary event of probability `p`:
/// `[ell*p, u*p] ∩ [1-u(1-p), 1-ell(1-p)]`.
pub fn binary_event_interval(p: UnitProb, ell: f64, u: f64) -> Result<(f64, f64), LpError> {
    if !(ell > 0.0 && ell <= 1.0 && u >= 1.0 && u.is_finite()) {
        return Err(LpError::Domain { ell, u });
    }
    let p = p.value();
    let lo = (ell * p).max(1.0 - u * (1.0 - p));
    let hi = (u * p).min(1.0 - ell * (1.0 - p));
    Ok((lo, hi))
}

fn event_indicator(dist: &FiniteDist, threshold: f64) -> Vec<bool> {
    dist.atoms().iter().map(|&a| a <= threshold).collect()
}

/// Single-layer program: extremize the event mass of one bounded normalized
/// tilt of `dist`.
pub fn solve_single_layer(
    dist: &FiniteDist,
    threshold: f64,
    ell: f64,
    u: f64,
    side: Side,
) -> Result<LpSolution, LpError> {
    if !(ell > 0.0 && ell <= 1.0 && u >= 1.0 && u.is_finite()) {
        return Err(LpError::Domain { ell, u });
    }
    let k = dist.len();
    let event = event_indicator(dist, threshold);
    let sign = if side == Side::Lower { 1.0 } else { -1.0 };
    let objective: Vec<f64> =
        event.iter().map(|&in_e| if in_e { sign } else { 0.0 }).collect();
    let problem = Problem {
        objective,
        rows: vec![Row { coeffs: vec![1.0; k], relation: Relation::Eq, rhs: 1.0 }],
        lower: dist.masses().iter().map(|r| ell * r).collect(),
        upper: dist.masses().iter().map(|r| u * r).collect(),
    };
    let sol = simplex::solve(&problem)?;
    let value = event.iter().zip(&sol.x).filter(|(e, _)| **e).map(|(_, t)| *t).sum();
    Ok(LpSolution { value, q_vars: Vec::new(), t_vars: sol.x, status: LpStatus::Optimal })
}

/// Two-layer program: source tilt `q` within `[l_gamma(e) r, u_gamma(e) r]`,
/// target tilt `t` within `[q/lambda, lambda q]`, both normalized; extremize
/// the target event mass.
pub fn solve_two_layer(
    dist: &FiniteDist,
    threshold: f64,
    e: UnitProb,
    s: SensitivityPair,
    side: Side,
) -> Result<LpSolution, LpError> {
    let e = e.value();
    if e <= 0.0 || e >= 1.0 {
        return Err(LpError::DegeneratePropensity(e));
    }
    let (ell, u) = ell_u(e, s.gamma());
    let lambda = s.lambda();
    let k = dist.len();
    let event = event_indicator(dist, threshold);
    let sign = if side == Side::Lower { 1.0 } else { -1.0 };

    // Variables: x = (q_1..q_K, t_1..t_K).
    let mut objective = vec![0.0; 2 * k];
    for (j, &in_e) in event.iter().enumerate() {
        if in_e {
            objective[k + j] = sign;
        }
    }
    let mut rows = Vec::with_capacity(2 + 2 * k);
    let mut sum_q = vec![0.0; 2 * k];
    sum_q[..k].fill(1.0);
    rows.push(Row { coeffs: sum_q, relation: Relation::Eq, rhs: 1.0 });
    let mut sum_t = vec![0.0; 2 * k];
    sum_t[k..].fill(1.0);
    rows.push(Row { coeffs: sum_t, relation: Relation::Eq, rhs: 1.0 });
    for j in 0..k {
        // t_j - lambda q_j <= 0
        let mut upper_row = vec![0.0; 2 * k];
        upper_row[j] = -lambda;
        upper_row[k + j] = 1.0;
        rows.push(Row { coeffs: upper_row, relation: Relation::Le, rhs: 0.0 });
        // q_j / lambda - t_j <= 0
        let mut lower_row = vec![0.0; 2 * k];
        lower_row[j] = 1.0 / lambda;
        lower_row[k + j] = -1.0;
        rows.push(Row { coeffs: lower_row, relation: Relation::Le, rhs: 0.0 });
    }
    let mut lower = vec![0.0; 2 * k];
    let mut upper = vec![1.0; 2 * k];
    for j in 0..k {
        lower[j] = ell * dist.masses()[j];
        upper[j] = u * dist.masses()[j];
    }
    let problem = Problem { objective, rows, lower, upper };
    let sol = simplex::solve(&problem)?;
    let value = event
        .iter()
        .enumerate()
        .filter(|(_, in_e)| **in_e)
        .map(|(j, _)| sol.x[k + j])
        .sum();
    Ok(LpSolution {
        value,
        q_vars: sol.x[..k].to_vec(),
        t_vars: sol.x[k..].to_vec(),
        status: LpStatus::Optimal,
    })
}

/// Fractional-greedy extremum of the event mass subject to a box and a unit
/// sum: start at the lower bounds and pour the remaining budget into event or
/// non-event coordinates first.
fn greedy_event(
    lower: &[f64],
    upper: &[f64],
    event: &[bool],
    maximize_event: bool,
) -> (f64, Vec<f64>) {
    let mut t: Vec<f64> = lower.to_vec();
    let mut budget = 1.0 - lower.iter().sum::<f64>();
    // Pour into event coords of the preferred group first, then the rest.
    for preferred in [true, false] {
        if budget <= 0.0 {
            break;
        }
        for j in 0..t.len() {
            if (event[j] == maximize_event) == preferred {
                let room = upper[j] - lower[j];
                let add = room.min(budget);
                t[j] += add;
                budget -= add;
                if budget <= 0.0 {
                    break;
                }
            }
        }
    }
    let value = event.iter().zip(&t).filter(|(e, _)| **e).map(|(_, v)| *v).sum();
    (value, t)
}

/// Greedy counterpart of [`solve_single_layer`]; same contract, independent
/// mechanism.
pub fn greedy_single_layer(
    dist: &FiniteDist,
    threshold: f64,
    ell: f64,
    u: f64,
    side: Side,
) -> Result<LpSolution, LpError> {
    if !(ell > 0.0 && ell <= 1.0 && u >= 1.0 && u.is_finite()) {
        return Err(LpError::Domain { ell, u });
    }
    let event = event_indicator(dist, threshold);
    let lower: Vec<f64> = dist.masses().iter().map(|r| ell * r).collect();
    let upper: Vec<f64> = dist.masses().iter().map(|r| u * r).collect();
    let (value, t) = greedy_event(&lower, &upper, &event, side == Side::Upper);
    Ok(LpSolution { value, q_vars: Vec::new(), t_vars: t, status: LpStatus::Optimal })
}

/// Greedy counterpart of [`solve_two_layer`]: extremize the source event mass
/// first, then the target event mass against the chosen source tilt.
pub fn greedy_two_layer(
    dist: &FiniteDist,
    threshold: f64,
    e: UnitProb,
    s: SensitivityPair,
    side: Side,
) -> Result<LpSolution, LpError> {
    let e = e.value();
    if e <= 0.0 || e >= 1.0 {
        return Err(LpError::DegeneratePropensity(e));
    }
    let (ell, u) = ell_u(e, s.gamma());
    let lambda = s.lambda();
    let event = event_indicator(dist, threshold);
    let maximize = side == Side::Upper;

    let q_lower: Vec<f64> = dist.masses().iter().map(|r| ell * r).collect();
    let q_upper: Vec<f64> = dist.masses().iter().map(|r| u * r).collect();
    let (_, q) = greedy_event(&q_lower, &q_upper, &event, maximize);

    let t_lower: Vec<f64> = q.iter().map(|qj| qj / lambda).collect();
    let t_upper: Vec<f64> = q.iter().map(|qj| qj * lambda).collect();
    let (value, t) = greedy_event(&t_lower, &t_upper, &event, maximize);
    Ok(LpSolution { value, q_vars: q, t_vars: t, status: LpStatus::Optimal })
}
