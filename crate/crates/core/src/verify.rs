//! Independent oracles and randomized checks, shared by the `check`
//! command and the test suites.
//!
//! * The QP oracle enumerates every linearly independent subset of rows,
//!   solves the equality-constrained projection, and keeps the best point
//!   that is primal feasible with nonnegative multipliers. With no such
//!   point the rows have no common solution.
//! * The chain oracle applies one level of the chain recursion to a black-box
//!   affine function with finite-difference derivatives and re-fits the
//!   result from `n + 1` evaluations.
//! * Derivative checks compare every shipped gradient and Hessian with
//!   central differences.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::barrier::{
    AffineInputConstraint, AffineSafety, BallSafety, PairwiseDistance, QuadraticLyapunov,
    ReciprocalBarrier, SafetyFunction,
};
use crate::error::Result;
use crate::estimator::{shrink, ShrinkKind};
use crate::high_degree::{
    build_affine_chain, relative_degree, ChainLevel, PairwiseDistanceChain, ShiftedPairwiseDistance,
};
use crate::linalg::{diffusion_trace, fd_gradient, fd_hessian, fd_hessian_from_grad};
use crate::qp::{solve_qp, QpProblem, QpStatus};
use crate::sde::{stream_rng, ControlAffineSystem, FnSystem};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| normal(rng))
}

fn normal_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

/// Verdict of the enumeration oracle.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleVerdict {
    Optimal(DVector<f64>),
    Infeasible,
}

fn subsets(count: usize, max_size: usize) -> impl Iterator<Item = Vec<usize>> {
    (0u32..(1u32 << count))
        .map(move |mask| (0..count).filter(|k| mask & (1 << k) != 0).collect::<Vec<_>>())
        .filter(move |s| s.len() <= max_size)
}

/// Exhaustive active-set enumeration for `min ½‖u − u_nom‖²` over the hard rows.
pub fn qp_oracle(problem: &QpProblem) -> OracleVerdict {
    let m = problem.dim();
    let rows: Vec<AffineInputConstraint> = problem.constraints.iter().map(|c| c.to_ge()).collect();
    let feasible = |u: &DVector<f64>| {
        rows.iter()
            .all(|r| r.a.dot(u) >= r.b - 1e-9 * (1.0 + r.b.abs() + r.a.norm() * u.norm()))
    };
    let mut best: Option<(f64, DVector<f64>)> = None;
    for set in subsets(rows.len(), m) {
        let u = if set.is_empty() {
            problem.u_nom.clone()
        } else {
            // u = u_nom + Aᵀλ with A Aᵀ λ = b − A u_nom, through a QR of Aᵀ
            let at = DMatrix::from_fn(m, set.len(), |i, j| rows[set[j]].a[i]);
            let sv = at.clone().singular_values();
            let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
            if lo <= 1e-8 * hi.max(1e-300) {
                continue;
            }
            let rhs = DVector::from_fn(set.len(), |i, _| rows[set[i]].b) - at.transpose() * &problem.u_nom;
            let qr = at.qr();
            let r = qr.r();
            let Some(w) = r.tr_solve_upper_triangular(&rhs) else {
                continue;
            };
            let Some(lambda) = r.solve_upper_triangular(&w) else {
                continue;
            };
            if lambda.iter().any(|&l| l < -1e-10 * (1.0 + lambda.amax())) {
                continue;
            }
            &problem.u_nom + qr.q() * w
        };
        if !feasible(&u) {
            continue;
        }
        let cost = (&u - &problem.u_nom).norm_squared();
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, u));
        }
    }
    match best {
        Some((_, u)) => OracleVerdict::Optimal(u),
        None => OracleVerdict::Infeasible,
    }
}

/// `m ≤ 4` inputs, at most 6 rows, standard normal entries.
pub fn random_qp(rng: &mut ChaCha8Rng) -> QpProblem {
    let m = rng.random_range(1..=4);
    let count = rng.random_range(0..=6);
    let u_nom = normal_vec(rng, m);
    let constraints = (0..count)
        .map(|_| {
            let a = normal_vec(rng, m);
            let b = normal(rng);
            AffineInputConstraint::ge(a, b).expect("finite row")
        })
        .collect();
    QpProblem::new(u_nom, constraints)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QpOracleSummary {
    pub instances: usize,
    pub feasible: usize,
    pub matched: usize,
    pub verdict_agreements: usize,
    pub max_error: f64,
}

impl QpOracleSummary {
    pub fn passed(&self) -> bool {
        self.matched == self.feasible && self.verdict_agreements == self.instances
    }
}

/// Compares [`solve_qp`] with [`qp_oracle`] on random instances.
pub fn check_qp_oracle(instances: usize, seed: u64) -> Result<QpOracleSummary> {
    let mut rng = stream_rng(seed, 0);
    let mut s = QpOracleSummary {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let problem = random_qp(&mut rng);
        let result = solve_qp(&problem)?;
        match qp_oracle(&problem) {
            OracleVerdict::Optimal(u) => {
                s.feasible += 1;
                if result.status == QpStatus::Optimal {
                    s.verdict_agreements += 1;
                    let err = (&result.u - &u).amax();
                    s.max_error = s.max_error.max(err);
                    if err <= 1e-8 {
                        s.matched += 1;
                    }
                }
            }
            OracleVerdict::Infeasible => {
                if result.status == QpStatus::Infeasible {
                    s.verdict_agreements += 1;
                }
            }
        }
    }
    Ok(s)
}

/// `(c, d)` of an affine function from `n + 1` evaluations.
fn fit_affine(n: usize, f: impl Fn(&DVector<f64>) -> f64) -> (DVector<f64>, f64) {
    let origin = DVector::zeros(n);
    let d = f(&origin);
    let c = DVector::from_fn(n, |k, _| {
        let mut e = origin.clone();
        e[k] = 1.0;
        f(&e) - d
    });
    (c, d)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChainOracleSummary {
    pub instances: usize,
    pub levels_checked: usize,
    pub max_error: f64,
    pub structure_instances: usize,
    pub max_structure_error: f64,
}

impl ChainOracleSummary {
    pub fn passed(&self) -> bool {
        self.max_error <= 1e-6 && self.max_structure_error <= 1e-9
    }
}

/// Random `F` with spectral scale near one, `n ≤ 5`.
fn random_drift(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    normal_mat(rng, n, n) / (n as f64).sqrt()
}

/// Closed-form chain vs numerically applied recursion, then the
/// `c_iᵀG = 0 (i < r′)` structure on constructed controllable triples.
pub fn check_affine_chain(instances: usize, seed: u64) -> Result<ChainOracleSummary> {
    let mut rng = stream_rng(seed, 1);
    let mut s = ChainOracleSummary {
        instances,
        structure_instances: instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let n = rng.random_range(1..=5);
        let depth = rng.random_range(0..=4);
        let f = random_drift(&mut rng, n);
        let q = rng.random_range(1..=3);
        let sigma = normal_mat(&mut rng, n, q);
        let a = normal_vec(&mut rng, n);
        let b = normal(&mut rng);
        let chain = build_affine_chain(&f, &sigma, &a, b, depth)?;

        let (mut c, mut d) = (a.clone(), -b);
        for i in 0..=depth {
            let scale = chain.coeffs[i].amax().max(1.0);
            let err = (&chain.coeffs[i] - &c).amax().max((chain.offsets[i] - d).abs()) / scale;
            s.max_error = s.max_error.max(err);
            s.levels_checked += 1;
            if i == depth {
                break;
            }
            let level = |x: &DVector<f64>| c.dot(x) + d;
            let next = |x: &DVector<f64>| {
                let grad = fd_gradient(level, x);
                let hess = fd_hessian(level, x);
                grad.dot(&(&f * x)) + 0.5 * diffusion_trace(&sigma, &hess) + level(x)
            };
            let (c_next, d_next) = fit_affine(n, next);
            c = c_next;
            d = d_next;
        }
    }

    for _ in 0..instances {
        let n = rng.random_range(2..=5);
        let m = rng.random_range(1..n);
        let f = random_drift(&mut rng, n);
        let g = normal_mat(&mut rng, n, m);
        // choose a orthogonal to G, FG, …, F^{r−1}G for a target r
        let max_r = (n - 1) / m;
        let target = rng.random_range(0..=max_r);
        let mut krylov = DMatrix::zeros(n, 0);
        let mut block = g.clone();
        for _ in 0..target {
            let cols = krylov.ncols();
            krylov = krylov.insert_columns(cols, m, 0.0);
            krylov.view_mut((0, cols), (n, m)).copy_from(&block);
            block = &f * &block;
        }
        let a = if target == 0 {
            normal_vec(&mut rng, n)
        } else {
            let svd = (&krylov * krylov.transpose()).symmetric_eigen();
            let k = svd
                .eigenvalues
                .iter()
                .enumerate()
                .min_by(|x, y| x.1.total_cmp(y.1))
                .map(|(k, _)| k)
                .expect("nonempty");
            svd.eigenvectors.column(k).into_owned()
        };
        let r = relative_degree(&f, &g, &a)?;
        let chain = build_affine_chain(&f, &DMatrix::zeros(n, 1), &a, 0.0, r)?;
        let scale = a.norm() * f.norm().max(1.0).powi(r as i32) * g.norm();
        for i in 0..r {
            let leak = (chain.coeffs[i].transpose() * &g).amax() / scale;
            s.max_structure_error = s.max_structure_error.max(leak);
        }
        let top = chain.coeffs[r].transpose() * &g;
        let direct = a.transpose() * f.pow(r as u32) * &g;
        s.max_structure_error = s.max_structure_error.max((top - direct).amax() / scale);
    }
    Ok(s)
}

/// Worst relative mismatch of one function over its probe points.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeReport {
    pub name: &'static str,
    pub points: usize,
    pub grad_error: f64,
    pub hess_error: f64,
}

/// Relative tolerance of the derivative checks.
pub const DERIVATIVE_TOL: f64 = 1e-4;

impl DerivativeReport {
    pub fn passed(&self) -> bool {
        self.grad_error <= DERIVATIVE_TOL && self.hess_error <= DERIVATIVE_TOL
    }
}

/// `‖analytic − numeric‖∞ / max(1, ‖analytic‖∞)`
fn rel_err(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    (analytic - numeric).amax() / analytic.amax().max(1.0)
}

fn as_col(v: DVector<f64>) -> DMatrix<f64> {
    let n = v.len();
    DMatrix::from_column_slice(n, 1, v.as_slice())
}

fn check_function(
    name: &'static str,
    h: &dyn SafetyFunction,
    points: &[DVector<f64>],
) -> DerivativeReport {
    let mut report = DerivativeReport {
        name,
        points: points.len(),
        grad_error: 0.0,
        hess_error: 0.0,
    };
    for x in points {
        let g = h.grad(x);
        let g_fd = fd_gradient(|y| h.value(y), x);
        report.grad_error = report.grad_error.max(rel_err(&as_col(g), &as_col(g_fd)));
        let hess_fd = fd_hessian_from_grad(|y| h.grad(y), x);
        report.hess_error = report.hess_error.max(rel_err(&h.hess(x), &hess_fd));
    }
    report
}

fn check_barrier(name: &'static str, b: &ReciprocalBarrier, points: &[DVector<f64>]) -> DerivativeReport {
    let value = |y: &DVector<f64>| b.value(y).unwrap_or(f64::NAN);
    let grad = |y: &DVector<f64>| {
        b.grad(y)
            .unwrap_or_else(|_| DVector::from_element(y.len(), f64::NAN))
    };
    let mut report = DerivativeReport {
        name,
        points: points.len(),
        grad_error: 0.0,
        hess_error: 0.0,
    };
    for x in points {
        let err_g = rel_err(&as_col(grad(x)), &as_col(fd_gradient(value, x)));
        let hess = b
            .hess(x)
            .unwrap_or_else(|_| DMatrix::from_element(x.len(), x.len(), f64::NAN));
        let err_h = rel_err(&hess, &fd_hessian_from_grad(grad, x));
        // NaN never passes
        report.grad_error = if err_g.is_nan() { f64::INFINITY } else { report.grad_error.max(err_g) };
        report.hess_error = if err_h.is_nan() { f64::INFINITY } else { report.hess_error.max(err_h) };
    }
    report
}

/// Random points for which `accept` holds.
fn probe_points(
    rng: &mut ChaCha8Rng,
    count: usize,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> DVector<f64>,
    accept: impl Fn(&DVector<f64>) -> bool,
) -> Vec<DVector<f64>> {
    let mut points = Vec::with_capacity(count);
    while points.len() < count {
        let x = draw(rng);
        if accept(&x) {
            points.push(x);
        }
    }
    points
}

/// Three planar agents with positions spread over a 40×40 box.
fn swarm_point(rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(12, |k, _| {
        let z: f64 = rng.sample(StandardNormal);
        if k % 4 < 2 {
            20.0 * (2.0 * rng.random::<f64>() - 1.0)
        } else {
            z
        }
    })
}

/// Gradient and Hessian checks of every shipped safety function and barrier.
pub fn check_derivatives(points_each: usize, seed: u64) -> Vec<DerivativeReport> {
    let mut rng = stream_rng(seed, 2);
    let mut reports = Vec::new();

    let n = 4;
    let affine = AffineSafety::new(normal_vec(&mut rng, n), normal(&mut rng));
    let generic = probe_points(&mut rng, points_each, |r| normal_vec(r, n) * 3.0, |_| true);
    reports.push(check_function("affine", &affine, &generic));

    let ball = BallSafety {
        center: normal_vec(&mut rng, n),
        radius: 6.0,
    };
    reports.push(check_function("ball", &ball, &generic));

    let w = normal_mat(&mut rng, n, n);
    let lyap = QuadraticLyapunov {
        target: normal_vec(&mut rng, n),
        weight: &w * w.transpose(),
    };
    reports.push(check_function("quadratic_lyapunov", &lyap, &generic));

    let pair = PairwiseDistance::new(0, 2, 3, 2.0);
    let apart = |x: &DVector<f64>| pair.distance(x) > 3.0;
    let swarm = probe_points(&mut rng, points_each, swarm_point, apart);
    reports.push(check_function("pairwise_distance", &pair, &swarm));

    let chain = PairwiseDistanceChain::new(pair, 0.8, 0.3);
    reports.push(check_function("pairwise_chain", &chain, &swarm));
    reports.push(check_function(
        "shifted_pairwise_distance",
        &ShiftedPairwiseDistance(chain),
        &swarm,
    ));
    let shrunk = shrink(pair, &ShrinkKind::PairwiseDistance(pair), 0.7).expect("closed form");
    reports.push(check_function("shrunk_pairwise_distance", &shrunk, &swarm));

    let ball_interior = probe_points(
        &mut rng,
        points_each,
        |r| &ball.center + normal_vec(r, n) * 2.0,
        |x| ball.value(x) > 1.0,
    );
    let b_ball = ReciprocalBarrier::new(Arc::new(ball.clone()));
    reports.push(check_barrier("reciprocal_ball", &b_ball, &ball_interior));

    let chain_positive = probe_points(&mut rng, points_each, swarm_point, |x| {
        apart(x) && chain.value(x) > 1.0
    });
    let b_chain = ReciprocalBarrier::new(Arc::new(chain));
    reports.push(check_barrier("reciprocal_pairwise_chain", &b_chain, &chain_positive));

    // one level of the general chain under a nonlinear plant
    let sys: Arc<dyn ControlAffineSystem> = Arc::new(FnSystem::new(
        2,
        1,
        2,
        |x| DVector::from_vec(vec![x[1], -x[0].sin()]),
        |_| DMatrix::from_vec(2, 1, vec![0.0, 1.0]),
        |x| DMatrix::from_vec(2, 2, vec![0.3, 0.0, 0.1 * x[0], 0.2]),
    ));
    let base = BallSafety {
        center: DVector::zeros(2),
        radius: 2.0,
    };
    let level = ChainLevel::new(Arc::new(base), sys);
    let plane = probe_points(&mut rng, points_each, |r| normal_vec(r, 2), |_| true);
    let mut report = check_function("chain_level", &level, &plane);
    // the level's own gradient is numerical; compare its Hessian with a
    // value-only difference quotient as well
    for x in &plane {
        let err = rel_err(&level.hess(x), &fd_hessian(|y| level.value(y), x));
        report.hess_error = report.hess_error.max(err);
    }
    reports.push(report);

    reports
}

/// Outcome of one named check, as printed by the CLI.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Runs the oracle and derivative suites. `scale` multiplies instance counts.
pub fn run_checks(scale: f64, seed: u64) -> Result<Vec<CheckOutcome>> {
    let count = |base: usize| ((base as f64 * scale).ceil() as usize).max(1);
    let mut out = Vec::new();

    let qp = check_qp_oracle(count(1000), seed)?;
    out.push(CheckOutcome {
        name: "qp_oracle".into(),
        passed: qp.passed(),
        detail: format!(
            "{} instances, {} feasible, {} matched, verdicts agree on {}, max |du| {:e}",
            qp.instances, qp.feasible, qp.matched, qp.verdict_agreements, qp.max_error
        ),
    });

    let chain = check_affine_chain(count(200), seed)?;
    out.push(CheckOutcome {
        name: "affine_chain".into(),
        passed: chain.passed(),
        detail: format!(
            "{} levels, max error {:e}; structure max {:e}",
            chain.levels_checked, chain.max_error, chain.max_structure_error
        ),
    });

    for r in check_derivatives(count(100), seed) {
        out.push(CheckOutcome {
            name: format!("derivatives/{}", r.name),
            passed: r.passed(),
            detail: format!(
                "{} points, grad {:e}, hess {:e}",
                r.points, r.grad_error, r.hess_error
            ),
        });
    }
    Ok(out)
}
