//! Dense two-phase primal simplex with variable bounds and Bland's rule.
//!
//! Sized for the audit programs in [`crate::lp`]: a few dozen variables, a
//! handful of rows. The basis matrix is refactorized every iteration, which
//! is wasteful but keeps the update logic trivial to verify; exactness and
//! independence from the closed-form envelope code matter more than speed
//! here.

use thiserror::Error;

/// Feasibility and reduced-cost tolerance.
pub(crate) const FEAS_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-11;
const MAX_ITER: usize = 20_000;

#[derive(Debug, Error, PartialEq)]
pub enum SimplexError {
    #[error("problem is infeasible (phase-1 objective {residual:.3e})")]
    Infeasible { residual: f64 },
    #[error("problem is unbounded")]
    Unbounded,
    #[error("simplex failed to converge within {MAX_ITER} iterations")]
    Stalled,
    #[error("singular basis matrix")]
    SingularBasis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Relation {
    Le,
    Eq,
    #[allow(dead_code)] // kept for completeness of the row interface
    Ge,
}

#[derive(Debug, Clone)]
pub(crate) struct Row {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

/// `minimize c'x  s.t.  rows, lower <= x <= upper` (upper may be infinite).
#[derive(Debug, Clone)]
pub(crate) struct Problem {
    pub objective: Vec<f64>,
    pub rows: Vec<Row>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Solution {
    #[allow(dead_code)] // diagnostics and tests read it
    pub objective: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VarStatus {
    Basic,
    AtLower,
    AtUpper,
}

struct Tableau {
    /// Dense column-major constraint matrix, m rows by n columns.
    a: Vec<f64>,
    m: usize,
    n: usize,
    rhs: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    status: Vec<VarStatus>,
    basis: Vec<usize>,
    x: Vec<f64>,
}

impl Tableau {
    fn col(&self, j: usize) -> &[f64] {
        &self.a[j * self.m..(j + 1) * self.m]
    }

    /// LU factorization of the current basis with partial pivoting.
    fn factorize(&self) -> Result<Lu, SimplexError> {
        let m = self.m;
        let mut lu = vec![0.0; m * m];
        for (k, &j) in self.basis.iter().enumerate() {
            let col = self.col(j);
            for i in 0..m {
                lu[k * m + i] = col[i];
            }
        }
        let mut perm: Vec<usize> = (0..m).collect();
        for k in 0..m {
            let mut piv = k;
            let mut best = lu[k * m + perm[k]].abs();
            for r in (k + 1)..m {
                let v = lu[k * m + perm[r]].abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best < PIVOT_TOL {
                return Err(SimplexError::SingularBasis);
            }
            perm.swap(k, piv);
            let pk = perm[k];
            let diag = lu[k * m + pk];
            for r in (k + 1)..m {
                let pr = perm[r];
                let factor = lu[k * m + pr] / diag;
                lu[k * m + pr] = factor;
                for c in (k + 1)..m {
                    lu[c * m + pr] -= factor * lu[c * m + pk];
                }
            }
        }
        Ok(Lu { lu, perm, m })
    }

    /// Current values of the basic variables given the nonbasic bounds.
    fn basic_values(&self, lu: &Lu) -> Vec<f64> {
        let m = self.m;
        let mut resid = self.rhs.clone();
        for j in 0..self.n {
            let v = match self.status[j] {
                VarStatus::AtLower => self.lower[j],
                VarStatus::AtUpper => self.upper[j],
                VarStatus::Basic => continue,
            };
            if v != 0.0 {
                let col = self.col(j);
                for i in 0..m {
                    resid[i] -= col[i] * v;
                }
            }
        }
        lu.solve(&resid)
    }
}

struct Lu {
    lu: Vec<f64>,
    perm: Vec<usize>,
    m: usize,
}

impl Lu {
    /// Solve B z = rhs.
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for k in 0..m {
            let mut v = rhs[self.perm[k]];
            for c in 0..k {
                v -= self.lu[c * m + self.perm[k]] * y[c];
            }
            y[k] = v;
        }
        for k in (0..m).rev() {
            let mut v = y[k];
            for c in (k + 1)..m {
                v -= self.lu[c * m + self.perm[k]] * y[c];
            }
            y[k] = v / self.lu[k * m + self.perm[k]];
        }
        y
    }

    /// Solve B' y = rhs.
    fn solve_transposed(&self, rhs: &[f64]) -> Vec<f64> {
        let m = self.m;
        // Forward pass on U', then backward on L'.
        let mut y = vec![0.0; m];
        for k in 0..m {
            let mut v = rhs[k];
            for c in 0..k {
                v -= self.lu[k * m + self.perm[c]] * y[c];
            }
            y[k] = v / self.lu[k * m + self.perm[k]];
        }
        for k in (0..m).rev() {
            let mut v = y[k];
            for c in (k + 1)..m {
                v -= self.lu[k * m + self.perm[c]] * y[c];
            }
            y[k] = v;
        }
        let mut out = vec![0.0; m];
        for k in 0..m {
            out[self.perm[k]] = y[k];
        }
        out
    }
}

pub(crate) fn solve(problem: &Problem) -> Result<Solution, SimplexError> {
    let n_struct = problem.objective.len();
    let m = problem.rows.len();
    debug_assert!(problem.rows.iter().all(|r| r.coeffs.len() == n_struct));

    // Equality form: one slack per inequality row, one artificial per row.
    let n_slack = problem.rows.iter().filter(|r| r.relation != Relation::Eq).count();
    let n = n_struct + n_slack + m;

    let mut a = vec![0.0; n * m];
    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];
    lower[..n_struct].copy_from_slice(&problem.lower);
    upper[..n_struct].copy_from_slice(&problem.upper);
    for (j, col) in a.chunks_mut(m).enumerate().take(n_struct) {
        for (i, row) in problem.rows.iter().enumerate() {
            col[i] = row.coeffs[j];
        }
    }
    let mut slack = n_struct;
    for (i, row) in problem.rows.iter().enumerate() {
        if row.relation != Relation::Eq {
            a[slack * m + i] = if row.relation == Relation::Le { 1.0 } else { -1.0 };
            lower[slack] = 0.0;
            upper[slack] = f64::INFINITY;
            slack += 1;
        }
    }

    // Start every non-artificial variable at its finite bound nearest zero.
    let mut status = vec![VarStatus::AtLower; n];
    for j in 0..(n_struct + n_slack) {
        status[j] = if lower[j].is_finite() {
            if upper[j].is_finite() && upper[j].abs() < lower[j].abs() {
                VarStatus::AtUpper
            } else {
                VarStatus::AtLower
            }
        } else {
            VarStatus::AtUpper
        };
    }

    // Artificial columns complete the identity basis, oriented so the
    // starting artificial values are nonnegative.
    let mut resid: Vec<f64> = problem.rows.iter().map(|r| r.rhs).collect();
    for j in 0..(n_struct + n_slack) {
        let v = match status[j] {
            VarStatus::AtLower => lower[j],
            VarStatus::AtUpper => upper[j],
            VarStatus::Basic => unreachable!(),
        };
        if v != 0.0 {
            for i in 0..m {
                resid[i] -= a[j * m + i] * v;
            }
        }
    }
    let mut basis = Vec::with_capacity(m);
    for i in 0..m {
        let j = n_struct + n_slack + i;
        a[j * m + i] = if resid[i] >= 0.0 { 1.0 } else { -1.0 };
        lower[j] = 0.0;
        upper[j] = f64::INFINITY;
        status[j] = VarStatus::Basic;
        basis.push(j);
    }

    let mut tab = Tableau { a, m, n, rhs: problem.rows.iter().map(|r| r.rhs).collect(), lower, upper, status, basis, x: vec![0.0; n] };

    // Phase 1: minimize the sum of artificials.
    let mut cost = vec![0.0; n];
    for c in cost.iter_mut().skip(n_struct + n_slack) {
        *c = 1.0;
    }
    iterate(&mut tab, &cost)?;
    let phase1: f64 = ((n_struct + n_slack)..n).map(|j| tab.x[j]).sum();
    if phase1 > 1e-7 {
        return Err(SimplexError::Infeasible { residual: phase1 });
    }
    // Pin artificials to zero for phase 2.
    for j in (n_struct + n_slack)..n {
        tab.upper[j] = 0.0;
        if tab.status[j] == VarStatus::AtUpper {
            tab.status[j] = VarStatus::AtLower;
        }
    }

    // Phase 2: original objective.
    let mut cost = vec![0.0; n];
    cost[..n_struct].copy_from_slice(&problem.objective);
    iterate(&mut tab, &cost)?;

    let x = tab.x[..n_struct].to_vec();
    let objective = problem.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
    Ok(Solution { objective, x })
}

/// Run primal simplex to optimality for the given cost vector.
fn iterate(tab: &mut Tableau, cost: &[f64]) -> Result<(), SimplexError> {
    for _ in 0..MAX_ITER {
        let lu = tab.factorize()?;
        let xb = tab.basic_values(&lu);
        for j in 0..tab.n {
            tab.x[j] = match tab.status[j] {
                VarStatus::AtLower => tab.lower[j],
                VarStatus::AtUpper => tab.upper[j],
                VarStatus::Basic => 0.0,
            };
        }
        for (i, &j) in tab.basis.iter().enumerate() {
            tab.x[j] = xb[i];
        }

        let cb: Vec<f64> = tab.basis.iter().map(|&j| cost[j]).collect();
        let y = lu.solve_transposed(&cb);

        // Bland: pick the lowest-index variable with an improving direction.
        let mut entering = None;
        for j in 0..tab.n {
            if tab.status[j] == VarStatus::Basic {
                continue;
            }
            let col = tab.col(j);
            let reduced = cost[j] - y.iter().zip(col).map(|(yi, ai)| yi * ai).sum::<f64>();
            let improving = match tab.status[j] {
                VarStatus::AtLower => reduced < -FEAS_TOL,
                VarStatus::AtUpper => reduced > FEAS_TOL,
                VarStatus::Basic => false,
            };
            // Fixed variables (lower == upper) cannot move.
            if improving && tab.upper[j] > tab.lower[j] {
                entering = Some(j);
                break;
            }
        }
        let Some(j_in) = entering else {
            return Ok(());
        };

        let increasing = tab.status[j_in] == VarStatus::AtLower;
        let sigma = if increasing { 1.0 } else { -1.0 };
        let w = lu.solve(tab.col(j_in));

        // Ratio test: basic variables hitting a bound, or the entering
        // variable reaching its opposite bound. Bland tie-break on the
        // leaving variable index.
        let mut t_best = tab.upper[j_in] - tab.lower[j_in]; // may be inf
        let mut leaving: Option<(usize, bool)> = None; // (basis slot, hits upper)
        for (i, &bj) in tab.basis.iter().enumerate() {
            let rate = -sigma * w[i];
            let (limit, hits_upper) = if rate > PIVOT_TOL {
                ((tab.upper[bj] - xb[i]) / rate, true)
            } else if rate < -PIVOT_TOL {
                ((tab.lower[bj] - xb[i]) / rate, false)
            } else {
                continue;
            };
            if !limit.is_finite() {
                continue;
            }
            let limit = limit.max(0.0);
            let replace = match leaving {
                None => limit < t_best - 1e-15 || (t_best.is_infinite() && limit.is_finite()),
                Some((slot, _)) => {
                    limit < t_best - 1e-15 || (limit <= t_best + 1e-15 && bj < tab.basis[slot])
                }
            };
            if replace {
                t_best = limit;
                leaving = Some((i, hits_upper));
            }
        }

        if !t_best.is_finite() {
            return Err(SimplexError::Unbounded);
        }

        match leaving {
            None => {
                // Bound flip: entering variable crosses to its other bound.
                tab.status[j_in] = if increasing { VarStatus::AtUpper } else { VarStatus::AtLower };
            }
            Some((slot, hits_upper)) => {
                let j_out = tab.basis[slot];
                tab.status[j_out] =
                    if hits_upper { VarStatus::AtUpper } else { VarStatus::AtLower };
                tab.status[j_in] = VarStatus::Basic;
                tab.basis[slot] = j_in;
            }
        }
    }
    Err(SimplexError::Stalled)
}
