//! Safety-filter policies built on the per-step QP.
//!
//! A [`SafetyFilter`] queries a nominal law, collects one affine row per
//! safety condition from its [`ConstraintSource`]s, and returns the input
//! closest to the nominal one. [`OutputFeedback`] wraps any
//! [`EstimatePolicy`] so that it only ever sees the EKF estimate.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use crate::barrier::{
    clf_constraint, rcbf_constraint, zcbf_constraint, AffineInputConstraint, ClassK,
    ReciprocalBarrier, SafetyFunction,
};
use crate::error::{Error, Result};
use crate::estimator::{EkfState, ObservationModel};
use crate::high_degree::{hrd_constraint, AffineChain};
use crate::linalg::diffusion_trace;
use crate::qp::{solve_with_fallback, Fallback, QpProblem, QpStatus, SoftConstraint, CLF_WEIGHT};
use crate::sde::{Action, ControlAffineSystem, LinearSystem, Policy, Wiener};

/// The four barrier constructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CbfMode {
    RcbfComplete,
    ZcbfComplete,
    RcbfIncomplete,
    ZcbfIncomplete,
}

impl CbfMode {
    pub fn is_incomplete(self) -> bool {
        matches!(self, Self::RcbfIncomplete | Self::ZcbfIncomplete)
    }
}

/// Which diffusion enters the second-order term of the incomplete rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceVariant {
    /// `tr(σᵀ ∂²h σ)`, the plant noise.
    ProcessNoise,
    /// `tr(νᵀKᵀ ∂²h K ν)`, the noise driving the estimate.
    #[default]
    EstimatorNoise,
}

/// Everything a Table-1 row may need. Fields a mode does not use may stay `None`.
#[derive(Clone, Copy)]
pub struct Table1Context<'a> {
    pub sys: &'a dyn ControlAffineSystem,
    /// True state for the complete modes, estimate for the incomplete ones.
    pub x: &'a DVector<f64>,
    /// `h` for ZCBF-complete, `ĥ` for ZCBF-incomplete.
    pub h: Option<&'a dyn SafetyFunction>,
    /// Barrier built on `h` (complete) or `ĥ` (incomplete).
    pub barrier: Option<&'a ReciprocalBarrier>,
    pub alpha3: ClassK,
    pub kappa: f64,
    pub gain: Option<&'a DMatrix<f64>>,
    pub obs: Option<&'a ObservationModel>,
    pub gamma: Option<f64>,
    pub trace: TraceVariant,
}

impl<'a> Table1Context<'a> {
    pub fn new(sys: &'a dyn ControlAffineSystem, x: &'a DVector<f64>) -> Self {
        Self {
            sys,
            x,
            h: None,
            barrier: None,
            alpha3: ClassK::identity(),
            kappa: 1.0,
            gain: None,
            obs: None,
            gamma: None,
            trace: TraceVariant::default(),
        }
    }
}

fn estimator_terms<'a>(
    ctx: &Table1Context<'a>,
) -> Result<(&'a DMatrix<f64>, &'a ObservationModel, f64)> {
    let gain = ctx.gain.ok_or(Error::MissingContext("Kalman gain"))?;
    let obs = ctx.obs.ok_or(Error::MissingContext("observation model"))?;
    let gamma = ctx.gamma.ok_or(Error::MissingContext("gamma"))?;
    Ok((gain, obs, gamma))
}

/// `½ tr(Dᵀ H D)` for the selected diffusion.
fn half_trace(
    ctx: &Table1Context<'_>,
    hess: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    obs: &ObservationModel,
) -> f64 {
    match ctx.trace {
        TraceVariant::EstimatorNoise => 0.5 * diffusion_trace(&(gain * &obs.nu), hess),
        TraceVariant::ProcessNoise => 0.5 * diffusion_trace(&ctx.sys.diffusion(ctx.x), hess),
    }
}

/// `γ ‖∂φ/∂x K c‖₂`.
fn robust_term(grad: &DVector<f64>, gain: &DMatrix<f64>, obs: &ObservationModel, gamma: f64) -> f64 {
    gamma * (obs.c.transpose() * (gain.transpose() * grad)).norm()
}

/// One row of the constraint table.
pub fn table1_constraint(mode: CbfMode, ctx: &Table1Context<'_>) -> Result<AffineInputConstraint> {
    match mode {
        CbfMode::ZcbfComplete => {
            let h = ctx.h.ok_or(Error::MissingContext("safety function"))?;
            zcbf_constraint(ctx.sys, h, ctx.x, ctx.kappa)
        }
        CbfMode::RcbfComplete => {
            let b = ctx.barrier.ok_or(Error::MissingContext("reciprocal barrier"))?;
            rcbf_constraint(ctx.sys, b, ctx.alpha3, ctx.x)
        }
        CbfMode::ZcbfIncomplete => {
            let h = ctx.h.ok_or(Error::MissingContext("shrunk safety function"))?;
            let (gain, obs, gamma) = estimator_terms(ctx)?;
            let x = ctx.x;
            let grad = h.grad(x);
            let hess = h.hess(x);
            let a = ctx.sys.input_map(x).transpose() * &grad;
            let b = -grad.dot(&ctx.sys.drift(x)) + robust_term(&grad, gain, obs, gamma)
                - half_trace(ctx, &hess, gain, obs)
                - ctx.kappa * h.value(x);
            AffineInputConstraint::ge(a, b)
        }
        CbfMode::RcbfIncomplete => {
            let barrier = ctx.barrier.ok_or(Error::MissingContext("reciprocal barrier"))?;
            let (gain, obs, gamma) = estimator_terms(ctx)?;
            let x = ctx.x;
            let grad = barrier.grad(x)?;
            let hess = barrier.hess(x)?;
            let a = ctx.sys.input_map(x).transpose() * &grad;
            let b = ctx.alpha3.eval(barrier.h.value(x))
                - grad.dot(&ctx.sys.drift(x))
                - robust_term(&grad, gain, obs, gamma)
                - half_trace(ctx, &hess, gain, obs);
            AffineInputConstraint::le(a, b)
        }
    }
}

/// What a constraint source sees at one step.
#[derive(Clone, Copy)]
pub struct StepContext<'a> {
    pub t: f64,
    /// The state the controller acts on: true state or estimate.
    pub x: &'a DVector<f64>,
    pub estimator: Option<&'a EkfState>,
}

/// A row for the per-step QP, optionally soft.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub row: AffineInputConstraint,
    pub soft_weight: Option<f64>,
}

impl Row {
    pub fn hard(row: AffineInputConstraint) -> Self {
        Self {
            row,
            soft_weight: None,
        }
    }
}

/// Produces the QP rows of one or more safety conditions.
pub trait ConstraintSource: Send + Sync {
    fn rows(&self, ctx: &StepContext<'_>, out: &mut Vec<Row>) -> Result<()>;
}

/// A Table-1 row for a single safety function.
pub struct Table1Source {
    pub mode: CbfMode,
    pub sys: Arc<dyn ControlAffineSystem>,
    pub h: Arc<dyn SafetyFunction>,
    pub barrier: ReciprocalBarrier,
    pub alpha3: ClassK,
    pub kappa: f64,
    pub obs: Option<ObservationModel>,
    pub gamma: Option<f64>,
    pub trace: TraceVariant,
}

impl Table1Source {
    /// Complete-information source; the RCBF uses `B = 1/h`.
    pub fn complete(mode: CbfMode, sys: Arc<dyn ControlAffineSystem>, h: Arc<dyn SafetyFunction>) -> Self {
        Self {
            mode,
            sys,
            barrier: ReciprocalBarrier::new(h.clone()),
            h,
            alpha3: ClassK::identity(),
            kappa: 1.0,
            obs: None,
            gamma: None,
            trace: TraceVariant::default(),
        }
    }

    /// Incomplete-information source around an already shrunk `ĥ`.
    pub fn incomplete(
        mode: CbfMode,
        sys: Arc<dyn ControlAffineSystem>,
        hhat: Arc<dyn SafetyFunction>,
        obs: ObservationModel,
        gamma: f64,
    ) -> Self {
        Self {
            obs: Some(obs),
            gamma: Some(gamma),
            ..Self::complete(mode, sys, hhat)
        }
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn with_trace(mut self, trace: TraceVariant) -> Self {
        self.trace = trace;
        self
    }
}

impl ConstraintSource for Table1Source {
    fn rows(&self, ctx: &StepContext<'_>, out: &mut Vec<Row>) -> Result<()> {
        let gain = ctx.estimator.map(|e| &e.k);
        if self.mode.is_incomplete() && gain.is_none() {
            return Err(Error::MissingContext("estimator state"));
        }
        let table = Table1Context {
            sys: self.sys.as_ref(),
            x: ctx.x,
            h: Some(self.h.as_ref()),
            barrier: Some(&self.barrier),
            alpha3: self.alpha3,
            kappa: self.kappa,
            gain,
            obs: self.obs.as_ref(),
            gamma: self.gamma,
            trace: self.trace,
        };
        out.push(Row::hard(table1_constraint(self.mode, &table)?));
        Ok(())
    }
}

/// The top-level row of an affine high-relative-degree chain.
pub struct HighDegreeSource {
    pub chain: AffineChain,
    pub sys: LinearSystem,
}

impl ConstraintSource for HighDegreeSource {
    fn rows(&self, ctx: &StepContext<'_>, out: &mut Vec<Row>) -> Result<()> {
        out.push(Row::hard(hrd_constraint(&self.chain, &self.sys, ctx.x)?));
        Ok(())
    }
}

/// A stochastic CLF row, soft unless `weight` is `None`.
pub struct ClfSource {
    pub sys: Arc<dyn ControlAffineSystem>,
    pub v: Arc<dyn SafetyFunction>,
    pub weight: Option<f64>,
}

impl ClfSource {
    pub fn soft(sys: Arc<dyn ControlAffineSystem>, v: Arc<dyn SafetyFunction>) -> Self {
        Self {
            sys,
            v,
            weight: Some(CLF_WEIGHT),
        }
    }
}

impl ConstraintSource for ClfSource {
    fn rows(&self, ctx: &StepContext<'_>, out: &mut Vec<Row>) -> Result<()> {
        out.push(Row {
            row: clf_constraint(self.sys.as_ref(), self.v.as_ref(), ctx.x)?,
            soft_weight: self.weight,
        });
        Ok(())
    }
}

pub type NominalLaw = Box<dyn FnMut(f64, &DVector<f64>) -> DVector<f64> + Send>;

/// A policy that only sees the estimator state.
pub trait EstimatePolicy {
    fn act_on_estimate(&mut self, t: f64, ekf: &EkfState) -> Result<Action>;
}

/// Minimum-deviation filter around a nominal law.
pub struct SafetyFilter {
    nominal: NominalLaw,
    sources: Vec<Box<dyn ConstraintSource>>,
    fallback: Fallback,
    last_u: Option<DVector<f64>>,
    rows: Vec<Row>,
    /// Status of the most recent solve.
    pub last_status: Option<QpStatus>,
}

impl SafetyFilter {
    pub fn new(nominal: NominalLaw, fallback: Fallback) -> Self {
        Self {
            nominal,
            sources: Vec::new(),
            fallback,
            last_u: None,
            rows: Vec::new(),
            last_status: None,
        }
    }

    pub fn with_source(mut self, source: Box<dyn ConstraintSource>) -> Self {
        self.sources.push(source);
        self
    }

    /// Filters the nominal input at `ctx.x`.
    pub fn filter(&mut self, ctx: &StepContext<'_>) -> Result<Action> {
        let u_nom = (self.nominal)(ctx.t, ctx.x);
        let last = self
            .last_u
            .clone()
            .unwrap_or_else(|| DVector::zeros(u_nom.len()));

        self.rows.clear();
        let mut built = Ok(());
        for source in &self.sources {
            built = source.rows(ctx, &mut self.rows);
            if built.is_err() {
                break;
            }
        }
        if let Err(err) = built {
            // a row that cannot be formed (e.g. a barrier evaluated outside
            // its domain) counts as an infeasible step
            if matches!(err, Error::DimensionMismatch { .. } | Error::MissingContext(_)) {
                return Err(err);
            }
            self.last_status = Some(QpStatus::Infeasible);
            return Ok(Action {
                u: last,
                feasible: false,
                nominal: Some(u_nom),
            });
        }

        let mut problem = QpProblem::new(u_nom.clone(), Vec::with_capacity(self.rows.len()));
        for r in self.rows.drain(..) {
            match r.soft_weight {
                Some(weight) => problem.soft.push(SoftConstraint { row: r.row, weight }),
                None => problem.constraints.push(r.row),
            }
        }
        let result = solve_with_fallback(&problem, self.fallback, &last)?;
        let feasible = result.status == QpStatus::Optimal;
        if feasible || self.fallback == Fallback::Relax {
            self.last_u = Some(result.u.clone());
        }
        self.last_status = Some(result.status);
        Ok(Action {
            u: result.u,
            feasible,
            nominal: Some(u_nom),
        })
    }
}

impl Policy for SafetyFilter {
    fn act(&mut self, t: f64, x: &DVector<f64>) -> Result<Action> {
        self.filter(&StepContext {
            t,
            x,
            estimator: None,
        })
    }
}

impl EstimatePolicy for SafetyFilter {
    fn act_on_estimate(&mut self, t: f64, ekf: &EkfState) -> Result<Action> {
        self.filter(&StepContext {
            t,
            x: &ekf.xhat,
            estimator: Some(ekf),
        })
    }
}

/// Nominal law applied to the estimate, without filtering.
pub struct Unfiltered(pub NominalLaw);

impl EstimatePolicy for Unfiltered {
    fn act_on_estimate(&mut self, t: f64, ekf: &EkfState) -> Result<Action> {
        let u = (self.0)(t, &ekf.xhat);
        Ok(Action {
            nominal: Some(u.clone()),
            ..Action::plain(u)
        })
    }
}

/// Runs an [`EstimatePolicy`] on EKF estimates built from simulated
/// measurements `dy = c x dt + ν dW`.
///
/// At each step the inner policy acts on `x̂ₖ`, then the filter absorbs the
/// measurement taken over `[tₖ, tₖ₊₁]` and moves to `x̂ₖ₊₁`.
pub struct OutputFeedback<P> {
    pub inner: P,
    sys: Arc<dyn ControlAffineSystem>,
    obs: ObservationModel,
    ekf: EkfState,
    rng: ChaCha8Rng,
    sensor: Wiener,
    dt: f64,
    sup_error: f64,
}

impl<P: EstimatePolicy> OutputFeedback<P> {
    pub fn new(
        inner: P,
        sys: Arc<dyn ControlAffineSystem>,
        obs: ObservationModel,
        ekf: EkfState,
        dt: f64,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let sensor = Wiener::new(obs.nu.ncols(), dt)?;
        Ok(Self {
            inner,
            sys,
            obs,
            ekf,
            rng,
            sensor,
            dt,
            sup_error: 0.0,
        })
    }

    pub fn estimator(&self) -> &EkfState {
        &self.ekf
    }

    /// `sup_t ‖xₜ − x̂ₜ‖₂` over the steps seen so far.
    pub fn sup_error(&self) -> f64 {
        self.sup_error
    }

    /// Includes the final state, which no action is taken on.
    pub fn observe_terminal(&mut self, x: &DVector<f64>) {
        self.sup_error = self.sup_error.max((x - &self.ekf.xhat).norm());
    }
}

impl<P: EstimatePolicy> Policy for OutputFeedback<P> {
    fn act(&mut self, t: f64, x: &DVector<f64>) -> Result<Action> {
        self.sup_error = self.sup_error.max((x - &self.ekf.xhat).norm());
        let action = self.inner.act_on_estimate(t, &self.ekf)?;
        let dy = &self.obs.c * x * self.dt + &self.obs.nu * self.sensor.increment(&mut self.rng);
        self.ekf.step(self.sys.as_ref(), &self.obs, &action.u, &dy, self.dt)?;
        Ok(action)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::{AffineSafety, FnSafety, Sense};
    use crate::estimator::{shrink, ShrinkKind};
    use crate::sde::FnSystem;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_vec(vec![x])
    }

    fn m1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn integrator() -> FnSystem {
        FnSystem::scalar_integrator(1.0)
    }

    #[test]
    fn incomplete_zcbf_scalar_example() {
        let sys = integrator();
        let obs = ObservationModel::new(m1(1.0), m1(1.0)).unwrap();
        let gain = m1(1.0);
        let hhat = AffineSafety::new(v1(1.0), 1.0);
        for (xhat, expected) in [(3.0, -1.5), (1.0, 0.5)] {
            let x = v1(xhat);
            let ctx = Table1Context {
                h: Some(&hhat),
                gain: Some(&gain),
                obs: Some(&obs),
                gamma: Some(0.5),
                ..Table1Context::new(&sys, &x)
            };
            let row = table1_constraint(CbfMode::ZcbfIncomplete, &ctx).unwrap();
            assert_eq!(row.sense, Sense::Ge);
            assert_eq!(row.a[0], 1.0);
            assert!((row.b - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gamma_matches_complete_row() {
        let sys = FnSystem::new(
            1,
            1,
            1,
            |x| x * 0.3,
            |_| m1(2.0),
            |_| m1(0.7),
        );
        let obs = ObservationModel::new(m1(1.0), m1(1.0)).unwrap();
        let gain = m1(0.4);
        let h = FnSafety::new(1, |x| 4.0 - x[0] * x[0], |x| v1(-2.0 * x[0]))
            .with_hessian(|_| m1(-2.0));
        let x = v1(0.9);
        let complete = zcbf_constraint(&sys, &h, &x, 1.0).unwrap();
        let ctx = Table1Context {
            h: Some(&h),
            gain: Some(&gain),
            obs: Some(&obs),
            gamma: Some(0.0),
            trace: TraceVariant::ProcessNoise,
            ..Table1Context::new(&sys, &x)
        };
        let incomplete = table1_constraint(CbfMode::ZcbfIncomplete, &ctx).unwrap();
        assert_eq!(incomplete.a, complete.a);
        assert!((incomplete.b - complete.b).abs() < 1e-14);
    }

    #[test]
    fn zcbf_rhs_grows_with_gamma() {
        let sys = integrator();
        let obs = ObservationModel::new(m1(1.0), m1(1.0)).unwrap();
        let gain = m1(0.8);
        let h = AffineSafety::new(v1(1.0), 0.0);
        let x = v1(2.0);
        let mut previous = f64::NEG_INFINITY;
        for gamma in [0.0, 0.1, 1.0, 3.0, 10.0] {
            let hhat = shrink(h.clone(), &ShrinkKind::Affine { a: v1(1.0) }, gamma).unwrap();
            let ctx = Table1Context {
                h: Some(&hhat),
                gain: Some(&gain),
                obs: Some(&obs),
                gamma: Some(gamma),
                ..Table1Context::new(&sys, &x)
            };
            let b = table1_constraint(CbfMode::ZcbfIncomplete, &ctx).unwrap().b;
            assert!(b >= previous);
            previous = b;
        }
    }

    #[test]
    fn incomplete_rcbf_sign_and_value() {
        // B = 1/x, x̂ = 2, f = 0, g = 1, K = ν = c = 1, γ = 1
        // ∂B = −1/4, ∂²B = 1/4: −u/4 ≤ 2 − 1/4 − 1/8
        let sys = integrator();
        let obs = ObservationModel::new(m1(1.0), m1(1.0)).unwrap();
        let gain = m1(1.0);
        let h: Arc<dyn SafetyFunction> = Arc::new(AffineSafety::new(v1(1.0), 0.0));
        let barrier = ReciprocalBarrier::new(h);
        let x = v1(2.0);
        let ctx = Table1Context {
            barrier: Some(&barrier),
            gain: Some(&gain),
            obs: Some(&obs),
            gamma: Some(1.0),
            ..Table1Context::new(&sys, &x)
        };
        let row = table1_constraint(CbfMode::RcbfIncomplete, &ctx).unwrap();
        assert_eq!(row.sense, Sense::Le);
        assert_eq!(row.a[0], -0.25);
        assert!((row.b - 1.625).abs() < 1e-15);
    }

    #[test]
    fn missing_context_is_reported() {
        let sys = integrator();
        let x = v1(1.0);
        let ctx = Table1Context::new(&sys, &x);
        for mode in [
            CbfMode::ZcbfComplete,
            CbfMode::RcbfComplete,
            CbfMode::ZcbfIncomplete,
            CbfMode::RcbfIncomplete,
        ] {
            assert!(matches!(
                table1_constraint(mode, &ctx),
                Err(Error::MissingContext(_))
            ));
        }
    }

    fn clamp_filter(nominal: f64) -> SafetyFilter {
        let sys: Arc<dyn ControlAffineSystem> = Arc::new(FnSystem::scalar_integrator(0.0));
        let h: Arc<dyn SafetyFunction> = Arc::new(AffineSafety::new(v1(1.0), 0.0));
        SafetyFilter::new(Box::new(move |_, _| v1(nominal)), Fallback::Relax)
            .with_source(Box::new(Table1Source::complete(CbfMode::ZcbfComplete, sys, h)))
    }

    #[test]
    fn filter_clamps_to_half_space() {
        // h = x at x = 2 gives u ≥ −2
        let action = clamp_filter(-5.0).act(0.0, &v1(2.0)).unwrap();
        assert!(action.feasible);
        assert!((action.u[0] + 2.0).abs() < 1e-15);
        assert_eq!(action.nominal, Some(v1(-5.0)));
    }

    #[test]
    fn filter_leaves_feasible_nominal() {
        let action = clamp_filter(-1.0).act(0.0, &v1(2.0)).unwrap();
        assert_eq!(action.u, v1(-1.0));
    }

    #[test]
    fn empty_filter_is_nominal() {
        let mut filter = SafetyFilter::new(Box::new(|t, x| x * t), Fallback::Hold);
        assert_eq!(filter.act(2.0, &v1(3.0)).unwrap().u, v1(6.0));
    }

    #[test]
    fn barrier_outside_domain_holds_last_input() {
        let sys: Arc<dyn ControlAffineSystem> = Arc::new(FnSystem::scalar_integrator(0.0));
        let h: Arc<dyn SafetyFunction> = Arc::new(AffineSafety::new(v1(1.0), 0.0));
        let mut filter = SafetyFilter::new(Box::new(|_, _| v1(-5.0)), Fallback::Relax)
            .with_source(Box::new(Table1Source::complete(CbfMode::RcbfComplete, sys, h)));
        let first = filter.act(0.0, &v1(1.0)).unwrap();
        assert!(first.feasible);
        let second = filter.act(0.0, &v1(-1.0)).unwrap();
        assert!(!second.feasible);
        assert_eq!(second.u, first.u);
    }
}
