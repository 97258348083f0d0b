//! Safety functions and the complete-information constraint builders.
//!
//! Every builder returns an [`AffineInputConstraint`], a half-space in
//! control space, obtained by substituting the Itô drift of a barrier into
//! its safety condition. The generator of `h` along
//! `dx = (f + g u) dt + σ dW` is
//!
//! ```text
//!     ∂h/∂x (f(x) + g(x) u) + ½ tr(σᵀ ∂²h/∂x² σ)
//! ```
//!
//! and each row is that expression rearranged to `a·u ≥ b` or `a·u ≤ b`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{diffusion_trace, fd_hessian_from_grad};
use crate::sde::ControlAffineSystem;

/// A twice-differentiable `h` whose superlevel set `{h ≥ 0}` is the safe set.
pub trait SafetyFunction: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> f64;
    /// `∂h/∂x` as a column vector.
    fn grad(&self, x: &DVector<f64>) -> DVector<f64>;
    /// `∂²h/∂x²`; central differences of [`grad`](Self::grad) unless overridden.
    fn hess(&self, x: &DVector<f64>) -> DMatrix<f64> {
        fd_hessian_from_grad(|y| self.grad(y), x)
    }
}

impl<T: SafetyFunction + ?Sized> SafetyFunction for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        (**self).value(x)
    }
    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        (**self).grad(x)
    }
    fn hess(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (**self).hess(x)
    }
}

/// `h(x) = a·x − b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSafety {
    pub a: DVector<f64>,
    pub b: f64,
}

impl AffineSafety {
    pub fn new(a: DVector<f64>, b: f64) -> Self {
        Self { a, b }
    }
}

impl SafetyFunction for AffineSafety {
    fn dim(&self) -> usize {
        self.a.len()
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.a.dot(x) - self.b
    }
    fn grad(&self, _x: &DVector<f64>) -> DVector<f64> {
        self.a.clone()
    }
    fn hess(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.a.len(), self.a.len())
    }
}

/// `h(x) = r² − ‖x − c‖²`, safe inside the ball.
#[derive(Debug, Clone, PartialEq)]
pub struct BallSafety {
    pub center: DVector<f64>,
    pub radius: f64,
}

impl SafetyFunction for BallSafety {
    fn dim(&self) -> usize {
        self.center.len()
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.radius * self.radius - (x - &self.center).norm_squared()
    }
    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.center) * -2.0
    }
    fn hess(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.center.len();
        DMatrix::identity(n, n) * -2.0
    }
}

/// Number of states per planar agent: `(px, py, vx, vy)`.
pub const AGENT_STATES: usize = 4;
/// Number of inputs per planar agent: `(ux, uy)`.
pub const AGENT_INPUTS: usize = 2;

/// `h(x) = ‖p_i − p_j‖ − D_s` on a stacked multi-agent state where agent `k`
/// occupies `x[4k..4k+4] = (px, py, vx, vy)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseDistance {
    pub i: usize,
    pub j: usize,
    pub n_agents: usize,
    pub safety_distance: f64,
}

impl PairwiseDistance {
    pub fn new(i: usize, j: usize, n_agents: usize, safety_distance: f64) -> Self {
        assert!(i != j && i < n_agents && j < n_agents, "invalid agent pair");
        Self {
            i,
            j,
            n_agents,
            safety_distance,
        }
    }

    pub fn relative_position(&self, x: &DVector<f64>) -> [f64; 2] {
        let (oi, oj) = (AGENT_STATES * self.i, AGENT_STATES * self.j);
        [x[oi] - x[oj], x[oi + 1] - x[oj + 1]]
    }

    pub fn relative_velocity(&self, x: &DVector<f64>) -> [f64; 2] {
        let (oi, oj) = (AGENT_STATES * self.i + 2, AGENT_STATES * self.j + 2);
        [x[oi] - x[oj], x[oi + 1] - x[oj + 1]]
    }

    pub fn distance(&self, x: &DVector<f64>) -> f64 {
        let [dx, dy] = self.relative_position(x);
        dx.hypot(dy)
    }
}

impl SafetyFunction for PairwiseDistance {
    fn dim(&self) -> usize {
        AGENT_STATES * self.n_agents
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.distance(x) - self.safety_distance
    }
    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let [dx, dy] = self.relative_position(x);
        let d = dx.hypot(dy);
        let mut g = DVector::zeros(self.dim());
        let (oi, oj) = (AGENT_STATES * self.i, AGENT_STATES * self.j);
        g[oi] = dx / d;
        g[oi + 1] = dy / d;
        g[oj] = -dx / d;
        g[oj + 1] = -dy / d;
        g
    }
    fn hess(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let [dx, dy] = self.relative_position(x);
        let d = dx.hypot(dy);
        let (ex, ey) = (dx / d, dy / d);
        // (I − e eᵀ) / d on the position blocks, with ± signs for i/j
        let local = [
            [(1.0 - ex * ex) / d, -ex * ey / d],
            [-ex * ey / d, (1.0 - ey * ey) / d],
        ];
        let mut h = DMatrix::zeros(self.dim(), self.dim());
        let offsets = [(AGENT_STATES * self.i, 1.0), (AGENT_STATES * self.j, -1.0)];
        for &(ra, sa) in &offsets {
            for &(rb, sb) in &offsets {
                for r in 0..2 {
                    for c in 0..2 {
                        h[(ra + r, rb + c)] = sa * sb * local[r][c];
                    }
                }
            }
        }
        h
    }
}

/// `V(x) = (x − x*)ᵀ W (x − x*)` with symmetric `W`, for CLF rows.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLyapunov {
    pub target: DVector<f64>,
    pub weight: DMatrix<f64>,
}

impl SafetyFunction for QuadraticLyapunov {
    fn dim(&self) -> usize {
        self.target.len()
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        let e = x - &self.target;
        e.dot(&(&self.weight * &e))
    }
    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let e = x - &self.target;
        (&self.weight + self.weight.transpose()) * e
    }
    fn hess(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        &self.weight + self.weight.transpose()
    }
}

type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type HessFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// A safety function from closures; without a Hessian closure the
/// finite-difference default is used.
#[derive(Clone)]
pub struct FnSafety {
    dim: usize,
    value: ScalarFn,
    grad: GradFn,
    hess: Option<HessFn>,
}

impl FnSafety {
    pub fn new<V, G>(dim: usize, value: V, grad: G) -> Self
    where
        V: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            dim,
            value: Arc::new(value),
            grad: Arc::new(grad),
            hess: None,
        }
    }

    pub fn with_hessian<H>(mut self, hess: H) -> Self
    where
        H: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.hess = Some(Arc::new(hess));
        self
    }
}

impl SafetyFunction for FnSafety {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        (self.value)(x)
    }
    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.grad)(x)
    }
    fn hess(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.hess {
            Some(h) => h(x),
            None => fd_hessian_from_grad(|y| (self.grad)(y), x),
        }
    }
}

/// Class-K functions (strictly increasing, zero at zero), extended oddly
/// to negative arguments.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ClassK {
    /// `α(s) = c·s`
    Linear { c: f64 },
    /// `α(s) = c·sᵏ`
    Power { c: f64, k: f64 },
}

impl Default for ClassK {
    fn default() -> Self {
        ClassK::Linear { c: 1.0 }
    }
}

impl ClassK {
    pub fn identity() -> Self {
        ClassK::Linear { c: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ClassK::Linear { c } if c > 0.0 && c.is_finite() => Ok(()),
            ClassK::Power { c, k } if c > 0.0 && c.is_finite() && k >= 1.0 && k.is_finite() => {
                Ok(())
            }
            other => Err(Error::Config(format!("invalid class-K function {other:?}"))),
        }
    }

    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            ClassK::Linear { c } => c * s,
            ClassK::Power { c, k } => c * s.signum() * s.abs().powf(k),
        }
    }

    /// `α(0) = 0` and strict increase on the grid `{i·upper/samples}`.
    pub fn check_on_grid(&self, upper: f64, samples: usize) -> bool {
        if self.eval(0.0) != 0.0 {
            return false;
        }
        let mut prev = 0.0;
        (1..=samples).all(|i| {
            let v = self.eval(upper * i as f64 / samples as f64);
            let ok = v > prev;
            prev = v;
            ok
        })
    }
}

/// Reciprocal barrier `B(x) = 1/h(x)`, defined on `int(C)`.
#[derive(Clone)]
pub struct ReciprocalBarrier {
    pub h: Arc<dyn SafetyFunction>,
    pub alpha1: ClassK,
    pub alpha2: ClassK,
}

impl ReciprocalBarrier {
    /// `B = 1/h` with `α₁ = α₂ = identity`, which meets the sandwich bound
    /// with equality.
    pub fn new(h: Arc<dyn SafetyFunction>) -> Self {
        Self {
            h,
            alpha1: ClassK::identity(),
            alpha2: ClassK::identity(),
        }
    }

    fn interior_value(&self, x: &DVector<f64>) -> Result<f64> {
        let v = self.h.value(x);
        if v > 0.0 {
            Ok(v)
        } else {
            Err(Error::Boundary { value: v })
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(1.0 / self.interior_value(x)?)
    }

    /// `∂B/∂x = −h⁻² ∂h/∂x`
    pub fn grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let h = self.interior_value(x)?;
        Ok(self.h.grad(x) * (-1.0 / (h * h)))
    }

    /// `∂²B/∂x² = 2h⁻³ ∇h ∇hᵀ − h⁻² ∂²h/∂x²`
    pub fn hess(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let h = self.interior_value(x)?;
        let g = self.h.grad(x);
        Ok(&g * g.transpose() * (2.0 / (h * h * h)) - self.h.hess(x) / (h * h))
    }

    /// Checks `1/α₁(h) ≤ B ≤ 1/α₂(h)` at every interior point supplied.
    pub fn check_bounds(&self, points: &[DVector<f64>]) -> bool {
        points.iter().all(|x| {
            let Ok(b) = self.value(x) else {
                return true;
            };
            let h = self.h.value(x);
            let lo = 1.0 / self.alpha1.eval(h);
            let hi = 1.0 / self.alpha2.eval(h);
            let tol = 1e-12 * b.abs().max(1.0);
            lo <= b + tol && b <= hi + tol
        })
    }
}

impl std::fmt::Debug for ReciprocalBarrier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReciprocalBarrier")
            .field("alpha1", &self.alpha1)
            .field("alpha2", &self.alpha2)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Sense {
    /// `a·u ≥ b`
    Ge,
    /// `a·u ≤ b`
    Le,
}

/// Half-space `a·u ≥ b` or `a·u ≤ b` in control space.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineInputConstraint {
    pub a: DVector<f64>,
    pub b: f64,
    pub sense: Sense,
}

impl AffineInputConstraint {
    pub fn new(a: DVector<f64>, b: f64, sense: Sense) -> Result<Self> {
        if !(b.is_finite() && a.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFiniteConstraint);
        }
        Ok(Self { a, b, sense })
    }

    pub fn ge(a: DVector<f64>, b: f64) -> Result<Self> {
        Self::new(a, b, Sense::Ge)
    }

    pub fn le(a: DVector<f64>, b: f64) -> Result<Self> {
        Self::new(a, b, Sense::Le)
    }

    /// The same half-space written as `a·u ≥ b`.
    pub fn to_ge(&self) -> Self {
        match self.sense {
            Sense::Ge => self.clone(),
            Sense::Le => Self {
                a: -&self.a,
                b: -self.b,
                sense: Sense::Ge,
            },
        }
    }

    /// Amount by which `u` violates the half-space (zero when satisfied).
    pub fn violation(&self, u: &DVector<f64>) -> f64 {
        let lhs = self.a.dot(u);
        match self.sense {
            Sense::Ge => (self.b - lhs).max(0.0),
            Sense::Le => (lhs - self.b).max(0.0),
        }
    }

    pub fn is_satisfied(&self, u: &DVector<f64>, tol: f64) -> bool {
        self.violation(u) <= tol
    }

    /// Zero normal: the row says nothing about `u`.
    pub fn is_degenerate(&self) -> bool {
        self.a.iter().all(|v| *v == 0.0)
    }
}

fn check_dims(sys: &dyn ControlAffineSystem, h: &dyn SafetyFunction, x: &DVector<f64>) -> Result<()> {
    if x.len() != sys.state_dim() {
        return Err(Error::DimensionMismatch {
            what: "state",
            expected: sys.state_dim(),
            got: x.len(),
        });
    }
    if h.dim() != sys.state_dim() {
        return Err(Error::DimensionMismatch {
            what: "safety function",
            expected: sys.state_dim(),
            got: h.dim(),
        });
    }
    Ok(())
}

/// Itô generator of `h` at `(x, u)`: `∂h/∂x (f + g u) + ½ tr(σᵀ ∂²h σ)`.
pub fn ito_drift(
    sys: &dyn ControlAffineSystem,
    h: &dyn SafetyFunction,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> f64 {
    let grad = h.grad(x);
    let flow = sys.drift(x) + sys.input_map(x) * u;
    grad.dot(&flow) + 0.5 * diffusion_trace(&sys.diffusion(x), &h.hess(x))
}

/// Zero-CBF row `∂h/∂x g u ≥ −∂h/∂x f − ½ tr(σᵀ ∂²h σ) − κ h`.
///
/// `κ = 1` is the unscaled condition. A zero normal is returned as is.
pub fn zcbf_constraint(
    sys: &dyn ControlAffineSystem,
    h: &dyn SafetyFunction,
    x: &DVector<f64>,
    kappa: f64,
) -> Result<AffineInputConstraint> {
    check_dims(sys, h, x)?;
    let grad = h.grad(x);
    let a = sys.input_map(x).transpose() * &grad;
    let trace = diffusion_trace(&sys.diffusion(x), &h.hess(x));
    let b = -grad.dot(&sys.drift(x)) - 0.5 * trace - kappa * h.value(x);
    AffineInputConstraint::ge(a, b)
}

/// Reciprocal-CBF row `∂B/∂x g u ≤ α₃(h) − ∂B/∂x f − ½ tr(σᵀ ∂²B σ)`.
pub fn rcbf_constraint(
    sys: &dyn ControlAffineSystem,
    barrier: &ReciprocalBarrier,
    alpha3: ClassK,
    x: &DVector<f64>,
) -> Result<AffineInputConstraint> {
    check_dims(sys, barrier.h.as_ref(), x)?;
    let grad = barrier.grad(x)?;
    let hess = barrier.hess(x)?;
    let a = sys.input_map(x).transpose() * &grad;
    let b = alpha3.eval(barrier.h.value(x))
        - grad.dot(&sys.drift(x))
        - 0.5 * diffusion_trace(&sys.diffusion(x), &hess);
    AffineInputConstraint::le(a, b)
}

/// Stochastic CLF row `∂V/∂x g u ≤ −∂V/∂x f − tr(σᵀ ∂²V σ)`.
///
/// The trace carries no ½ factor.
pub fn clf_constraint(
    sys: &dyn ControlAffineSystem,
    v: &dyn SafetyFunction,
    x: &DVector<f64>,
) -> Result<AffineInputConstraint> {
    check_dims(sys, v, x)?;
    let grad = v.grad(x);
    let a = sys.input_map(x).transpose() * &grad;
    let b = -grad.dot(&sys.drift(x)) - diffusion_trace(&sys.diffusion(x), &v.hess(x));
    AffineInputConstraint::le(a, b)
}
