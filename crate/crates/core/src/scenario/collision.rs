//! Planar agents that start on a circle and swap to the antipodal point.
//!
//! Each agent is a double integrator `dp = v dt + σ_p dW`, `dv = u dt + σ_v dW`
//! with its own Brownian motions. One QP over all inputs is solved per step
//! with one row per unordered pair, built on the first chain level
//! `h₁ = e·Δv + s/‖Δp‖ + ‖Δp‖ − D_s − h̄` of the pairwise distance.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector, Matrix4, Vector2, Vector4};
use rand_chacha::ChaCha8Rng;

use super::config::{ControllerMode, ScenarioConfig};
use crate::barrier::{AffineInputConstraint, PairwiseDistance, AGENT_INPUTS, AGENT_STATES};
use crate::controller::TraceVariant;
use crate::error::{Error, Result};
use crate::estimator::{
    calibrate_lambda_star_auto, gamma_lti, LambdaCalibration, ObservationModel,
    KNOWN_STATE_COVARIANCE,
};
use crate::high_degree::PairwiseDistanceChain;
use crate::linalg::block_diag;
use crate::qp::{solve_with_fallback, Fallback, QpProblem, QpStatus};
use crate::sde::{Action, LinearSystem, Policy, Wiener};

/// Everything fixed about one collision configuration.
#[derive(Debug, Clone)]
pub struct CollisionScenario {
    pub n_agents: usize,
    pub pairs: Vec<PairwiseDistance>,
    pub system: LinearSystem,
    pub x0: DVector<f64>,
    pub goals: Vec<Vector2<f64>>,
    pub k1: f64,
    pub k2: f64,
    pub sigma_p: f64,
    pub sigma_v: f64,
    pub nu: f64,
    pub d_s: f64,
}

/// `(A, G, σ)` of one agent in `(px, py, vx, vy)` order.
pub fn agent_matrices(sigma_p: f64, sigma_v: f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut a = DMatrix::zeros(AGENT_STATES, AGENT_STATES);
    a[(0, 2)] = 1.0;
    a[(1, 3)] = 1.0;
    let mut g = DMatrix::zeros(AGENT_STATES, AGENT_INPUTS);
    g[(2, 0)] = 1.0;
    g[(3, 1)] = 1.0;
    let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![sigma_p, sigma_p, sigma_v, sigma_v]));
    (a, g, sigma)
}

pub fn build_collision_scenario(cfg: &ScenarioConfig) -> Result<CollisionScenario> {
    cfg.validate()?;
    let n = cfg.n_agents;
    let (a, g, sigma) = agent_matrices(cfg.sigma_p, cfg.sigma_v);
    let system = LinearSystem::new(
        block_diag(&vec![a; n]),
        block_diag(&vec![g; n]),
        block_diag(&vec![sigma; n]),
    )?;
    let mut x0 = DVector::zeros(AGENT_STATES * n);
    let mut goals = Vec::with_capacity(n);
    for k in 0..n {
        let theta = 2.0 * PI * k as f64 / n as f64;
        let p = Vector2::new(theta.cos(), theta.sin()) * cfg.rho;
        x0[AGENT_STATES * k] = p.x;
        x0[AGENT_STATES * k + 1] = p.y;
        goals.push(-p);
    }
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push(PairwiseDistance::new(i, j, n, cfg.d_s));
        }
    }
    let scenario = CollisionScenario {
        n_agents: n,
        pairs,
        system,
        x0,
        goals,
        k1: cfg.k1,
        k2: cfg.k2,
        sigma_p: cfg.sigma_p,
        sigma_v: cfg.sigma_v,
        nu: cfg.nu,
        d_s: cfg.d_s,
    };
    if scenario.min_distance(&scenario.x0) < cfg.d_s {
        return Err(Error::Config("agents start inside the safety distance".into()));
    }
    Ok(scenario)
}

impl CollisionScenario {
    /// `ū_i = −k₁(p_i − r_i) − k₂ v_i`.
    pub fn nominal(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut u = DVector::zeros(AGENT_INPUTS * self.n_agents);
        for (k, goal) in self.goals.iter().enumerate() {
            let o = AGENT_STATES * k;
            u[AGENT_INPUTS * k] = -self.k1 * (x[o] - goal.x) - self.k2 * x[o + 2];
            u[AGENT_INPUTS * k + 1] = -self.k1 * (x[o + 1] - goal.y) - self.k2 * x[o + 3];
        }
        u
    }

    pub fn min_distance(&self, x: &DVector<f64>) -> f64 {
        self.pairs
            .iter()
            .map(|p| p.distance(x))
            .fold(f64::INFINITY, f64::min)
    }

    /// Per-agent observation model `dy = x dt + ν dW`.
    pub fn agent_observation(&self) -> Result<ObservationModel> {
        ObservationModel::new(
            DMatrix::identity(AGENT_STATES, AGENT_STATES),
            DMatrix::identity(AGENT_STATES, AGENT_STATES) * self.nu,
        )
    }

    /// `λ*` of the per-agent filter. Every agent shares it because the
    /// covariance recursion does not depend on the measurements.
    pub fn calibrate(&self, dt: f64) -> Result<LambdaCalibration> {
        let (a, _, sigma) = agent_matrices(self.sigma_p, self.sigma_v);
        let q = &sigma * sigma.transpose();
        let p0 = DMatrix::identity(AGENT_STATES, AGENT_STATES) * KNOWN_STATE_COVARIANCE;
        calibrate_lambda_star_auto(&a, &self.agent_observation()?, &q, &p0, dt)
    }

    /// `γ` for the stacked state of all agents.
    pub fn gamma(&self, cal: &LambdaCalibration, eps: f64) -> Result<f64> {
        gamma_lti(cal.lambda_star, AGENT_STATES * self.n_agents, eps)
    }

    fn process_covariance(&self) -> Matrix4<f64> {
        let (p, v) = (self.sigma_p * self.sigma_p, self.sigma_v * self.sigma_v);
        Matrix4::from_diagonal(&Vector4::new(p, p, v, v))
    }
}

/// The stacked EKF for independent agents observed as `dy = x dt + ν dW`.
///
/// The covariance is block diagonal with identical blocks, so one 4×4
/// Riccati recursion serves every agent.
#[derive(Debug, Clone, PartialEq)]
pub struct SwarmEstimator {
    pub xhat: DVector<f64>,
    pub p: Matrix4<f64>,
    pub k: Matrix4<f64>,
    q: Matrix4<f64>,
    nu: f64,
}

const AGENT_DRIFT: Matrix4<f64> = Matrix4::new(
    0.0, 0.0, 1.0, 0.0, //
    0.0, 0.0, 0.0, 1.0, //
    0.0, 0.0, 0.0, 0.0, //
    0.0, 0.0, 0.0, 0.0,
);

impl SwarmEstimator {
    pub fn new(scenario: &CollisionScenario, xhat: DVector<f64>) -> Self {
        let p = Matrix4::identity() * KNOWN_STATE_COVARIANCE;
        let nu2 = scenario.nu * scenario.nu;
        Self {
            xhat,
            p,
            k: p / nu2,
            q: scenario.process_covariance(),
            nu: scenario.nu,
        }
    }

    /// Covariance of the estimate's own diffusion `K ν`, per agent.
    pub fn estimate_diffusion(&self) -> Matrix4<f64> {
        self.k * self.k.transpose() * (self.nu * self.nu)
    }

    pub fn step(&mut self, u: &DVector<f64>, dy: &DVector<f64>, dt: f64) {
        let agents = self.xhat.len() / AGENT_STATES;
        for k in 0..agents {
            let o = AGENT_STATES * k;
            let xh = Vector4::new(self.xhat[o], self.xhat[o + 1], self.xhat[o + 2], self.xhat[o + 3]);
            let innovation =
                Vector4::new(dy[o], dy[o + 1], dy[o + 2], dy[o + 3]) - xh * dt;
            let drift = Vector4::new(xh[2], xh[3], u[AGENT_INPUTS * k], u[AGENT_INPUTS * k + 1]);
            let next = xh + drift * dt + self.k * innovation;
            self.xhat.fixed_rows_mut::<4>(o).copy_from(&next);
        }
        let nu2 = self.nu * self.nu;
        let rate = AGENT_DRIFT * self.p + self.p * AGENT_DRIFT.transpose() + self.q
            - self.p * self.p / nu2;
        let p = self.p + rate * dt;
        self.p = (p + p.transpose()) * 0.5;
        self.k = self.p / nu2;
    }
}

/// How the rows of one step are parameterised.
#[derive(Debug, Clone, Copy)]
struct RowTerms {
    /// `s` in `h₁`.
    noise_rate: f64,
    /// `D_i + D_j` for the trace term.
    diffusion_sum: Matrix4<f64>,
    shrink: f64,
    /// `(γ, K)` for the robustness term.
    robust: Option<(f64, Matrix4<f64>)>,
    reciprocal: bool,
}

/// Closed-loop controller for the collision scenario.
pub struct CollisionPolicy<'a> {
    scenario: &'a CollisionScenario,
    mode: ControllerMode,
    kappa: f64,
    gamma: f64,
    trace: TraceVariant,
    fallback: Fallback,
    dt: f64,
    estimator: Option<SwarmEstimator>,
    sensor: Option<(Wiener, ChaCha8Rng)>,
    last_u: DVector<f64>,
    sup_error: f64,
}

impl<'a> CollisionPolicy<'a> {
    /// `sensor_rng` drives the measurement noise in estimate-based modes.
    pub fn new(
        scenario: &'a CollisionScenario,
        cfg: &ScenarioConfig,
        gamma: f64,
        sensor_rng: ChaCha8Rng,
    ) -> Result<Self> {
        let (estimator, sensor) = if cfg.mode.uses_estimate() {
            (
                Some(SwarmEstimator::new(scenario, scenario.x0.clone())),
                Some((Wiener::new(scenario.x0.len(), cfg.dt)?, sensor_rng)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            scenario,
            mode: cfg.mode,
            kappa: cfg.kappa,
            gamma,
            trace: cfg.trace_variant,
            fallback: cfg.fallback,
            dt: cfg.dt,
            estimator,
            sensor,
            last_u: DVector::zeros(AGENT_INPUTS * scenario.n_agents),
            sup_error: 0.0,
        })
    }

    pub fn estimator(&self) -> Option<&SwarmEstimator> {
        self.estimator.as_ref()
    }

    pub fn sup_error(&self) -> Option<f64> {
        self.estimator.as_ref().map(|_| self.sup_error)
    }

    fn terms(&self) -> RowTerms {
        let sc = self.scenario;
        let process = sc.process_covariance();
        let sp2 = sc.sigma_p * sc.sigma_p;
        let mut terms = RowTerms {
            noise_rate: sp2,
            diffusion_sum: process * 2.0,
            shrink: 0.0,
            robust: None,
            reciprocal: matches!(
                self.mode,
                ControllerMode::RcbfComplete | ControllerMode::RcbfIncomplete
            ),
        };
        match self.mode {
            ControllerMode::SimplifiedCbf => {
                terms.noise_rate = 0.0;
                terms.diffusion_sum = Matrix4::zeros();
            }
            ControllerMode::ZcbfIncomplete | ControllerMode::RcbfIncomplete => {
                let est = self.estimator.as_ref().expect("estimate-based mode");
                if self.trace == TraceVariant::EstimatorNoise {
                    let d = est.estimate_diffusion();
                    terms.noise_rate = 0.5 * (d[(0, 0)] + d[(1, 1)]);
                    terms.diffusion_sum = d * 2.0;
                }
                terms.shrink = self.gamma * SQRT_2;
                terms.robust = Some((self.gamma, est.k));
            }
            _ => {}
        }
        terms
    }

    /// One row per pair at the state the controller acts on.
    pub fn rows(&self, x: &DVector<f64>) -> Result<Vec<AffineInputConstraint>> {
        let terms = self.terms();
        let m = AGENT_INPUTS * self.scenario.n_agents;
        let mut rows = Vec::with_capacity(self.scenario.pairs.len());
        for pair in &self.scenario.pairs {
            let chain = PairwiseDistanceChain::new(*pair, terms.noise_rate, terms.shrink);
            let local = chain.local(x);
            let trace = |h: &Matrix4<f64>| 0.5 * terms.diffusion_sum.component_mul(h).sum();
            // both agents' blocks of K are equal and the signs square away
            let robust = |g: &Vector4<f64>| match terms.robust {
                Some((gamma, k)) => gamma * SQRT_2 * (k.transpose() * g).norm(),
                None => 0.0,
            };
            let mut a = DVector::zeros(m);
            let (oi, oj) = (AGENT_INPUTS * pair.i, AGENT_INPUTS * pair.j);
            let drift_along = |g: &Vector4<f64>| g[0] * local.rel_velocity.x + g[1] * local.rel_velocity.y;
            if terms.reciprocal {
                let h = local.h1;
                if h <= 0.0 || !h.is_finite() {
                    return Err(Error::Boundary { value: h });
                }
                let grad_b = -local.grad / (h * h);
                let hess_b = local.grad * local.grad.transpose() * (2.0 / (h * h * h))
                    - local.hess / (h * h);
                a[oi] = grad_b[2];
                a[oi + 1] = grad_b[3];
                a[oj] = -grad_b[2];
                a[oj + 1] = -grad_b[3];
                let b = h - drift_along(&grad_b) - robust(&grad_b) - trace(&hess_b);
                rows.push(AffineInputConstraint::le(a, b)?);
            } else {
                a[oi] = local.unit.x;
                a[oi + 1] = local.unit.y;
                a[oj] = -local.unit.x;
                a[oj + 1] = -local.unit.y;
                let b = -drift_along(&local.grad) + robust(&local.grad)
                    - trace(&local.hess)
                    - self.kappa * local.h1;
                rows.push(AffineInputConstraint::ge(a, b)?);
            }
        }
        Ok(rows)
    }
}

impl Policy for CollisionPolicy<'_> {
    fn act(&mut self, _t: f64, x: &DVector<f64>) -> Result<Action> {
        let xs = match &self.estimator {
            Some(est) => {
                self.sup_error = self.sup_error.max((x - &est.xhat).norm());
                est.xhat.clone()
            }
            None => x.clone(),
        };
        let u_nom = self.scenario.nominal(&xs);
        let (u, feasible) = if self.mode == ControllerMode::BaselineLinear {
            (u_nom.clone(), true)
        } else {
            match self.rows(&xs) {
                Ok(rows) => {
                    let problem = QpProblem::new(u_nom.clone(), rows);
                    let result = solve_with_fallback(&problem, self.fallback, &self.last_u)?;
                    let feasible = result.status == QpStatus::Optimal;
                    (result.u, feasible)
                }
                Err(Error::Boundary { .. }) => (self.last_u.clone(), false),
                Err(err) => return Err(err),
            }
        };
        if feasible || self.fallback == Fallback::Relax {
            self.last_u.copy_from(&u);
        }
        if let (Some(est), Some((wiener, rng))) = (self.estimator.as_mut(), self.sensor.as_mut()) {
            let dy = x * self.dt + wiener.increment(rng) * self.scenario.nu;
            est.step(&u, &dy, self.dt);
        }
        Ok(Action {
            u,
            feasible,
            nominal: Some(u_nom),
        })
    }
}
