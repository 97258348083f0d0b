//! Small dense projection QP
//!
//! ```text
//!     minimize ½‖u − u_nom‖²   subject to   aᵢ·u ≥ bᵢ   (hard rows)
//!                                           aⱼ·u + sⱼ ≥ bⱼ, sⱼ ≥ 0   (soft rows, cost ½ wⱼ sⱼ²)
//! ```
//!
//! solved with the Goldfarb–Idnani dual active-set method. Every slack is
//! rescaled by `√wⱼ` so the Hessian stays the identity and each iteration
//! only needs a least-squares solve against the active normals.

use nalgebra::{DMatrix, DVector};

use crate::barrier::AffineInputConstraint;
use crate::error::{Error, Result};

/// Slack weight used when the hard rows are relaxed after an infeasible solve.
pub const RELAX_WEIGHT: f64 = 1e6;
/// Default slack weight for stability (CLF) rows.
pub const CLF_WEIGHT: f64 = 1e3;
/// Tolerance of the feasibility and stationarity checks.
pub const KKT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SoftConstraint {
    pub row: AffineInputConstraint,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QpProblem {
    pub u_nom: DVector<f64>,
    pub constraints: Vec<AffineInputConstraint>,
    pub soft: Vec<SoftConstraint>,
}

impl QpProblem {
    pub fn new(u_nom: DVector<f64>, constraints: Vec<AffineInputConstraint>) -> Self {
        Self {
            u_nom,
            constraints,
            soft: Vec::new(),
        }
    }

    pub fn with_soft(mut self, row: AffineInputConstraint, weight: f64) -> Self {
        self.soft.push(SoftConstraint { row, weight });
        self
    }

    pub fn dim(&self) -> usize {
        self.u_nom.len()
    }

    fn check_dims(&self) -> Result<()> {
        let m = self.dim();
        let rows = self
            .constraints
            .iter()
            .chain(self.soft.iter().map(|s| &s.row));
        for row in rows {
            if row.a.len() != m {
                return Err(Error::DimensionMismatch {
                    what: "constraint row",
                    expected: m,
                    got: row.a.len(),
                });
            }
        }
        for s in &self.soft {
            if !(s.weight > 0.0 && s.weight.is_finite()) {
                return Err(Error::Solver(format!("soft weight must be positive, got {}", s.weight)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Relaxed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpResult {
    pub status: QpStatus,
    pub u: DVector<f64>,
    /// Hard rows in the final working set, ascending.
    pub active_set: Vec<usize>,
    /// Total violation `Σ max(0, bᵢ − aᵢ·u)` over hard and soft rows.
    pub slack: f64,
    /// Multipliers of the hard rows in GE form (zero when inactive).
    pub multipliers: DVector<f64>,
}

/// What the safety filter does when the hard rows have no common solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Reuse the last feasible input.
    Hold,
    /// Minimize the weighted squared violation of all rows.
    #[default]
    Relax,
}

/// Rows `nᵢ·z ≥ bᵢ` of the scaled problem.
struct Rows {
    normals: Vec<DVector<f64>>,
    rhs: Vec<f64>,
}

enum Outcome {
    Optimal { z: DVector<f64>, active: Vec<usize>, lambda: Vec<f64> },
    Infeasible,
}

/// Projection of `z0` onto `{z : nᵢ·z ≥ bᵢ}`.
fn goldfarb_idnani(z0: &DVector<f64>, rows: &Rows) -> Result<Outcome> {
    let dim = z0.len();
    let count = rows.rhs.len();
    let norms: Vec<f64> = rows.normals.iter().map(|n| n.norm()).collect();

    // A zero normal is either vacuous or contradictory.
    for k in 0..count {
        if norms[k] == 0.0 && rows.rhs[k] > 0.0 {
            return Ok(Outcome::Infeasible);
        }
    }

    let mut z = z0.clone();
    let mut active: Vec<usize> = Vec::new();
    let mut lambda: Vec<f64> = Vec::new();
    let cap = 50 * (count + dim) + 100;
    let mut iterations = 0usize;

    loop {
        // most violated row, normalized, lowest index on ties
        let scale = 1.0 + z.amax();
        let mut pick: Option<(usize, f64)> = None;
        for k in 0..count {
            if norms[k] == 0.0 || active.contains(&k) {
                continue;
            }
            let slack = (rows.normals[k].dot(&z) - rows.rhs[k]) / norms[k];
            let tol = 1e-13 * (scale + rows.rhs[k].abs() / norms[k]);
            if slack < -tol && pick.is_none_or(|(_, best)| slack < best) {
                pick = Some((k, slack));
            }
        }
        let Some((p, _)) = pick else {
            if let Some((zp, lp)) = polish(z0, rows, &active, &z) {
                return Ok(Outcome::Optimal { z: zp, active, lambda: lp });
            }
            return Ok(Outcome::Optimal { z, active, lambda });
        };
        let np = &rows.normals[p];
        let mut lambda_p = 0.0;

        loop {
            iterations += 1;
            if iterations > cap {
                return Err(Error::Solver(format!(
                    "active-set iteration cap of {cap} reached"
                )));
            }
            let (r, dir) = split_against(&rows.normals, &active, np, dim)?;
            let dir_sq = dir.norm_squared();
            // largest step before an active multiplier reaches zero
            let mut blocking: Option<(usize, f64)> = None;
            for (pos, &rj) in r.iter().enumerate() {
                if rj > 0.0 {
                    let t = lambda[pos] / rj;
                    if blocking.is_none_or(|(_, best)| t < best) {
                        blocking = Some((pos, t));
                    }
                }
            }
            let violation = rows.rhs[p] - np.dot(&z);
            // treat n_p as dependent on the active normals below sin θ = 1e-9
            let full = if dir_sq > 1e-18 * np.norm_squared() {
                Some(violation / np.dot(&dir))
            } else {
                None
            };
            match (full, blocking) {
                (None, None) => return Ok(Outcome::Infeasible),
                (None, Some((pos, t))) => {
                    for (l, rj) in lambda.iter_mut().zip(r.iter()) {
                        *l -= t * rj;
                    }
                    lambda_p += t;
                    active.remove(pos);
                    lambda.remove(pos);
                }
                (Some(t_full), blocking) => {
                    let t_full = t_full.max(0.0);
                    match blocking {
                        Some((pos, t)) if t < t_full => {
                            z += &dir * t;
                            for (l, rj) in lambda.iter_mut().zip(r.iter()) {
                                *l -= t * rj;
                            }
                            lambda_p += t;
                            active.remove(pos);
                            lambda.remove(pos);
                        }
                        _ => {
                            z += &dir * t_full;
                            for (l, rj) in lambda.iter_mut().zip(r.iter()) {
                                *l -= t_full * rj;
                            }
                            active.push(p);
                            lambda.push(lambda_p + t_full);
                            break;
                        }
                    }
                }
            }
        }
    }
}

/// Writes `n = N r + d` with `d` orthogonal to the active normals `N`,
/// using a Householder QR of `N`.
fn split_against(
    normals: &[DVector<f64>],
    active: &[usize],
    n: &DVector<f64>,
    dim: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if active.is_empty() {
        return Ok((DVector::zeros(0), n.clone()));
    }
    let basis = DMatrix::from_fn(dim, active.len(), |i, j| normals[active[j]][i]);
    let qr = basis.qr();
    let q = qr.q();
    let coords = q.transpose() * n;
    let r = qr
        .r()
        .solve_upper_triangular(&coords)
        .ok_or_else(|| Error::Solver("active normals became linearly dependent".into()))?;
    let dir = n - q * coords;
    Ok((r, dir))
}

fn max_violation(rows: &Rows, z: &DVector<f64>) -> f64 {
    rows.normals
        .iter()
        .zip(&rows.rhs)
        .map(|(n, b)| b - n.dot(z))
        .fold(0.0, f64::max)
}

/// Recomputes the projection onto the final working set in one QR solve,
/// which drops the rounding accumulated by the incremental updates. The
/// polished point is kept only if its multipliers stay nonnegative and it
/// is at least as feasible as the incremental one, up to rounding.
fn polish(
    z0: &DVector<f64>,
    rows: &Rows,
    active: &[usize],
    z: &DVector<f64>,
) -> Option<(DVector<f64>, Vec<f64>)> {
    if active.is_empty() {
        return None;
    }
    let dim = z0.len();
    let basis = DMatrix::from_fn(dim, active.len(), |i, j| rows.normals[active[j]][i]);
    let residual = DVector::from_fn(active.len(), |i, _| {
        rows.rhs[active[i]] - rows.normals[active[i]].dot(z0)
    });
    let qr = basis.qr();
    let r = qr.r();
    let w = r.tr_solve_upper_triangular(&residual)?;
    let lambda = r.solve_upper_triangular(&w)?;
    if lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return None;
    }
    let zp = z0 + qr.q() * w;
    let floor = 1e-12 * (1.0 + zp.amax());
    (max_violation(rows, &zp) <= max_violation(rows, z).max(floor))
        .then(|| (zp, lambda.iter().copied().collect()))
}

fn total_violation(problem: &QpProblem, u: &DVector<f64>) -> f64 {
    problem
        .constraints
        .iter()
        .chain(problem.soft.iter().map(|s| &s.row))
        .map(|c| c.violation(u))
        .sum()
}

/// Solves the QP. Hard rows are strict; soft rows are penalized.
pub fn solve_qp(problem: &QpProblem) -> Result<QpResult> {
    problem.check_dims()?;
    let m = problem.dim();
    let n_soft = problem.soft.len();
    let dim = m + n_soft;
    let hard: Vec<AffineInputConstraint> = problem.constraints.iter().map(|c| c.to_ge()).collect();

    let mut normals = Vec::with_capacity(hard.len() + 2 * n_soft);
    let mut rhs = Vec::with_capacity(normals.capacity());
    for row in &hard {
        let mut n = DVector::zeros(dim);
        n.rows_mut(0, m).copy_from(&row.a);
        normals.push(n);
        rhs.push(row.b);
    }
    for (k, s) in problem.soft.iter().enumerate() {
        let row = s.row.to_ge();
        let mut n = DVector::zeros(dim);
        n.rows_mut(0, m).copy_from(&row.a);
        n[m + k] = 1.0 / s.weight.sqrt();
        normals.push(n);
        rhs.push(row.b);
    }
    for k in 0..n_soft {
        let mut n = DVector::zeros(dim);
        n[m + k] = 1.0;
        normals.push(n);
        rhs.push(0.0);
    }

    let mut z0 = DVector::zeros(dim);
    z0.rows_mut(0, m).copy_from(&problem.u_nom);
    let rows = Rows { normals, rhs };

    match goldfarb_idnani(&z0, &rows)? {
        Outcome::Infeasible => Ok(QpResult {
            status: QpStatus::Infeasible,
            u: problem.u_nom.clone(),
            active_set: Vec::new(),
            slack: f64::NAN,
            multipliers: DVector::zeros(hard.len()),
        }),
        Outcome::Optimal { z, active, lambda } => {
            let u = z.rows(0, m).into_owned();
            let mut multipliers = DVector::zeros(hard.len());
            let mut active_set = Vec::new();
            for (&k, &l) in active.iter().zip(lambda.iter()) {
                if k < hard.len() {
                    multipliers[k] = l;
                    active_set.push(k);
                }
            }
            active_set.sort_unstable();
            let slack = total_violation(problem, &u);
            Ok(QpResult {
                status: QpStatus::Optimal,
                u,
                active_set,
                slack,
                multipliers,
            })
        }
    }
}

/// Re-solves with every hard row turned into a soft row of weight [`RELAX_WEIGHT`].
pub fn solve_relaxed(problem: &QpProblem) -> Result<QpResult> {
    let mut relaxed = QpProblem {
        u_nom: problem.u_nom.clone(),
        constraints: Vec::new(),
        soft: problem
            .constraints
            .iter()
            .map(|row| SoftConstraint {
                row: row.clone(),
                weight: RELAX_WEIGHT,
            })
            .collect(),
    };
    relaxed.soft.extend(problem.soft.iter().cloned());
    let mut result = solve_qp(&relaxed)?;
    result.status = QpStatus::Relaxed;
    result.active_set.clear();
    result.multipliers = DVector::zeros(problem.constraints.len());
    Ok(result)
}

/// Solves, then applies `fallback` if the hard rows are infeasible.
/// `Hold` returns `last_u` with status `Infeasible`.
pub fn solve_with_fallback(
    problem: &QpProblem,
    fallback: Fallback,
    last_u: &DVector<f64>,
) -> Result<QpResult> {
    let result = solve_qp(problem)?;
    if result.status != QpStatus::Infeasible {
        return Ok(result);
    }
    match fallback {
        Fallback::Relax => solve_relaxed(problem),
        Fallback::Hold => Ok(QpResult {
            u: last_u.clone(),
            ..result
        }),
    }
}

/// Largest primal violation and stationarity residual of a hard-row result.
pub fn kkt_residuals(problem: &QpProblem, result: &QpResult) -> (f64, f64) {
    let mut stationarity = &result.u - &problem.u_nom;
    let mut primal = 0.0_f64;
    for (k, row) in problem.constraints.iter().enumerate() {
        let ge = row.to_ge();
        primal = primal.max(ge.violation(&result.u));
        stationarity -= &ge.a * result.multipliers[k];
    }
    (primal, stationarity.amax())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_vec(xs.to_vec())
    }

    fn ge(a: &[f64], b: f64) -> AffineInputConstraint {
        AffineInputConstraint::ge(v(a), b).unwrap()
    }

    #[test]
    fn unconstrained_returns_nominal() {
        let r = solve_qp(&QpProblem::new(v(&[3.0, -1.0]), vec![])).unwrap();
        assert_eq!(r.status, QpStatus::Optimal);
        assert_eq!(r.u, v(&[3.0, -1.0]));
    }

    #[test]
    fn single_row_projection() {
        let p = QpProblem::new(v(&[0.0, 0.0]), vec![ge(&[1.0, 0.0], 1.0)]);
        let r = solve_qp(&p).unwrap();
        assert_eq!(r.status, QpStatus::Optimal);
        assert_eq!(r.u, v(&[1.0, 0.0]));
        assert_eq!(r.active_set, vec![0]);
        let (primal, stat) = kkt_residuals(&p, &r);
        assert!(primal <= KKT_TOL && stat <= KKT_TOL);
    }

    #[test]
    fn contradictory_rows() {
        let p = QpProblem::new(v(&[0.0]), vec![ge(&[1.0], 1.0), ge(&[-1.0], 0.0)]);
        assert_eq!(solve_qp(&p).unwrap().status, QpStatus::Infeasible);
        let relaxed = solve_with_fallback(&p, Fallback::Relax, &v(&[0.0])).unwrap();
        assert_eq!(relaxed.status, QpStatus::Relaxed);
        assert!((relaxed.u[0] - 0.5).abs() < 1e-6);
        let held = solve_with_fallback(&p, Fallback::Hold, &v(&[0.25])).unwrap();
        assert_eq!(held.status, QpStatus::Infeasible);
        assert_eq!(held.u, v(&[0.25]));
    }

    #[test]
    fn feasible_nominal_is_untouched() {
        let p = QpProblem::new(v(&[2.0, 2.0]), vec![ge(&[1.0, 1.0], 1.0), ge(&[-1.0, 0.0], -5.0)]);
        let r = solve_qp(&p).unwrap();
        assert_eq!(r.u, p.u_nom);
        assert!(r.active_set.is_empty());
    }

    #[test]
    fn le_rows_are_negated() {
        let row = AffineInputConstraint::le(v(&[1.0]), -2.0).unwrap();
        let r = solve_qp(&QpProblem::new(v(&[0.0]), vec![row])).unwrap();
        assert!((r.u[0] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn corner_with_dropped_constraint() {
        // projection of (0,0) onto u1 >= 1, u1 + u2 >= 3, u2 >= -10
        let p = QpProblem::new(
            v(&[0.0, 0.0]),
            vec![ge(&[1.0, 0.0], 1.0), ge(&[1.0, 1.0], 3.0), ge(&[0.0, 1.0], -10.0)],
        );
        let r = solve_qp(&p).unwrap();
        assert!((r.u - v(&[1.5, 1.5])).amax() < 1e-12);
        assert_eq!(r.active_set, vec![1]);
    }

    #[test]
    fn zero_rows() {
        let vacuous = QpProblem::new(v(&[1.0]), vec![ge(&[0.0], -1.0)]);
        assert_eq!(solve_qp(&vacuous).unwrap().u, v(&[1.0]));
        let impossible = QpProblem::new(v(&[1.0]), vec![ge(&[0.0], 1.0)]);
        assert_eq!(solve_qp(&impossible).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn soft_row_trades_off_against_weight() {
        // min ½u² + ½w(1−u)² → u = w/(1+w)
        let p = QpProblem::new(v(&[0.0]), vec![]).with_soft(ge(&[1.0], 1.0), 3.0);
        let r = solve_qp(&p).unwrap();
        assert!((r.u[0] - 0.75).abs() < 1e-12);
        assert!((r.slack - 0.25).abs() < 1e-12);
    }

    #[test]
    fn hard_row_beats_soft_row() {
        let p = QpProblem::new(v(&[0.0]), vec![ge(&[-1.0], 0.0)]).with_soft(ge(&[1.0], 1.0), CLF_WEIGHT);
        let r = solve_qp(&p).unwrap();
        assert_eq!(r.status, QpStatus::Optimal);
        assert!(r.u[0].abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let p = QpProblem::new(v(&[0.0, 0.0]), vec![ge(&[1.0], 0.0)]);
        assert!(matches!(solve_qp(&p), Err(Error::DimensionMismatch { .. })));
    }
}
