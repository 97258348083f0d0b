//! Controlled Itô SDEs `dx = (f(x) + g(x)u) dt + σ(x) dW` and their
//! fixed-step Euler–Maruyama integration.
//!
//! Randomness comes from [`ChaCha8Rng`]: a counter-based generator whose
//! 64-bit stream id splits one seed into independent replicate streams.
//! Gaussians are drawn with the ziggurat sampler of `rand_distr::StandardNormal`;
//! for a fixed build the pair `(seed, stream)` therefore fixes every
//! increment bit for bit.
//!
//! Strong solutions are assumed to exist for every admissible control
//! signal; that is an obligation on whoever writes the drift and diffusion.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::barrier::SafetyFunction;
use crate::error::{Error, Result};
use crate::linalg::{fd_jacobian, inf_norm};

/// Runs are aborted once `‖x‖∞` exceeds this value.
pub const BLOWUP_LIMIT: f64 = 1e9;

/// Upper bound on the number of steps in a single run.
pub const STEP_BUDGET: usize = 100_000_000;

/// Drift `f`, input map `g` and diffusion `σ` of a control-affine SDE.
///
/// Implementations must be deterministic and return finite values of the
/// declared shapes: `f(x) ∈ ℝⁿ`, `g(x) ∈ ℝ^{n×m}`, `σ(x) ∈ ℝ^{n×q}`.
pub trait ControlAffineSystem: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    fn input_map(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn diffusion(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// `∂(f(x) + g(x)u)/∂x`, by central differences unless overridden.
    fn closed_loop_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        fd_jacobian(|y| self.drift(y) + self.input_map(y) * u, x)
    }
}

/// `dx = (F x + G u) dt + Σ dW` with constant matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(f: DMatrix<f64>, g: DMatrix<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let n = f.nrows();
        if f.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "F columns",
                expected: n,
                got: f.ncols(),
            });
        }
        if g.nrows() != n {
            return Err(Error::DimensionMismatch {
                what: "G rows",
                expected: n,
                got: g.nrows(),
            });
        }
        if sigma.nrows() != n {
            return Err(Error::DimensionMismatch {
                what: "sigma rows",
                expected: n,
                got: sigma.nrows(),
            });
        }
        Ok(Self { f, g, sigma })
    }

    /// Planar double integrator for one axis: `ṗ = v`, `v̇ = u`.
    pub fn double_integrator(sigma: DMatrix<f64>) -> Result<Self> {
        Self::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            sigma,
        )
    }
}

impl ControlAffineSystem for LinearSystem {
    fn state_dim(&self) -> usize {
        self.f.nrows()
    }
    fn input_dim(&self) -> usize {
        self.g.ncols()
    }
    fn noise_dim(&self) -> usize {
        self.sigma.ncols()
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.f * x
    }
    fn input_map(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.g.clone()
    }
    fn diffusion(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.sigma.clone()
    }
    fn closed_loop_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.f.clone()
    }
}

type VecFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type MatFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// A control-affine system assembled from closures.
#[derive(Clone)]
pub struct FnSystem {
    n: usize,
    m: usize,
    q: usize,
    f: VecFn,
    g: MatFn,
    sigma: MatFn,
}

impl FnSystem {
    pub fn new<F, G, S>(n: usize, m: usize, q: usize, f: F, g: G, sigma: S) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        G: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        S: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            n,
            m,
            q,
            f: Arc::new(f),
            g: Arc::new(g),
            sigma: Arc::new(sigma),
        }
    }

    /// `dx = u dt + s dW` in one dimension.
    pub fn scalar_integrator(s: f64) -> Self {
        Self::new(
            1,
            1,
            1,
            |_| DVector::zeros(1),
            |_| DMatrix::from_element(1, 1, 1.0),
            move |_| DMatrix::from_element(1, 1, s),
        )
    }
}

impl std::fmt::Debug for FnSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnSystem")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("q", &self.q)
            .finish_non_exhaustive()
    }
}

impl ControlAffineSystem for FnSystem {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn input_dim(&self) -> usize {
        self.m
    }
    fn noise_dim(&self) -> usize {
        self.q
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(x)
    }
    fn input_map(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.g)(x)
    }
    fn diffusion(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.sigma)(x)
    }
}

/// Generator for replicate `stream` of a campaign seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Brownian increments `W(t + dt) − W(t)` of a fixed dimension and step.
#[derive(Debug, Clone, Copy)]
pub struct Wiener {
    dim: usize,
    sqrt_dt: f64,
}

impl Wiener {
    pub fn new(dim: usize, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("step size must be positive, got {dt}")));
        }
        Ok(Self {
            dim,
            sqrt_dt: dt.sqrt(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `dim` independent `N(0, dt)` samples.
    pub fn increment<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let s = self.sqrt_dt;
        DVector::from_fn(self.dim, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            s * z
        })
    }
}

/// One Euler–Maruyama step `x + (f(x) + g(x)u) dt + σ(x) dW`.
///
/// Returns [`Error::IntegrationBlowup`] (with `step = 0`; callers that know
/// the step index overwrite it) when the result is not finite.
pub fn em_step(
    sys: &dyn ControlAffineSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
    dw: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mut next = x + (sys.drift(x) + sys.input_map(x) * u) * dt;
    if !dw.is_empty() {
        next += sys.diffusion(x) * dw;
    }
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::IntegrationBlowup {
            step: 0,
            norm: f64::INFINITY,
        })
    }
}

/// Control chosen by a policy for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub u: DVector<f64>,
    /// Whether the safety QP behind this action was feasible.
    pub feasible: bool,
    /// The nominal input the action deviates from, when there is one.
    pub nominal: Option<DVector<f64>>,
}

impl Action {
    pub fn plain(u: DVector<f64>) -> Self {
        Self {
            u,
            feasible: true,
            nominal: None,
        }
    }
}

/// A closed-loop control law queried once per integration step.
pub trait Policy {
    fn act(&mut self, t: f64, x: &DVector<f64>) -> Result<Action>;
}

impl<F> Policy for F
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    fn act(&mut self, t: f64, x: &DVector<f64>) -> Result<Action> {
        Ok(Action::plain(self(t, x)))
    }
}

/// What the loop hands to an observer at each sampled instant.
pub struct Sample<'a> {
    pub step: usize,
    pub t: f64,
    pub x: &'a DVector<f64>,
    /// `None` for the terminal state.
    pub action: Option<&'a Action>,
}

/// Number of steps `⌈T/dt⌉` for a horizon, checked against [`STEP_BUDGET`].
pub fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("step size must be positive, got {dt}")));
    }
    let ratio = horizon / dt;
    // absorb representation error in e.g. 10.0 / 0.001
    let steps = (ratio - 1e-9 * ratio.max(1.0)).ceil().max(1.0);
    if steps > STEP_BUDGET as f64 {
        return Err(Error::Config(format!(
            "{steps} steps exceed the budget of {STEP_BUDGET}"
        )));
    }
    Ok(steps as usize)
}

/// Drives `policy` in closed loop with `sys` for `steps` steps, reporting
/// every sampled state to `observe`. Returns the terminal state.
pub fn run_closed_loop<P, R, O>(
    sys: &dyn ControlAffineSystem,
    policy: &mut P,
    x0: &DVector<f64>,
    steps: usize,
    dt: f64,
    rng: &mut R,
    mut observe: O,
) -> Result<DVector<f64>>
where
    P: Policy + ?Sized,
    R: Rng + ?Sized,
    O: FnMut(Sample<'_>),
{
    if x0.len() != sys.state_dim() {
        return Err(Error::DimensionMismatch {
            what: "initial state",
            expected: sys.state_dim(),
            got: x0.len(),
        });
    }
    let wiener = Wiener::new(sys.noise_dim(), dt)?;
    let mut x = x0.clone();
    for step in 0..steps {
        let t = step as f64 * dt;
        let action = policy.act(t, &x)?;
        if action.u.len() != sys.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "policy output",
                expected: sys.input_dim(),
                got: action.u.len(),
            });
        }
        observe(Sample {
            step,
            t,
            x: &x,
            action: Some(&action),
        });
        let dw = wiener.increment(rng);
        x = match em_step(sys, &x, &action.u, dt, &dw) {
            Ok(next) => next,
            Err(_) => {
                return Err(Error::IntegrationBlowup {
                    step: step + 1,
                    norm: f64::INFINITY,
                })
            }
        };
        let norm = inf_norm(&x);
        if norm > BLOWUP_LIMIT {
            return Err(Error::IntegrationBlowup {
                step: step + 1,
                norm,
            });
        }
    }
    observe(Sample {
        step: steps,
        t: steps as f64 * dt,
        x: &x,
        action: None,
    });
    Ok(x)
}

/// One recorded run. `states`, `times` and `margins` have one more entry
/// than `inputs` and `feasible_flags`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub nominal_inputs: Vec<Option<DVector<f64>>>,
    /// `margins[k][j]` is the j-th registered safety function at step k.
    pub margins: Vec<Vec<f64>>,
    pub feasible_flags: Vec<bool>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    /// Smallest margin over all steps and safety functions.
    pub fn min_margin(&self) -> Option<f64> {
        self.margins
            .iter()
            .flat_map(|m| m.iter().copied())
            .reduce(f64::min)
    }
}

/// Integrates a closed loop over `[0, horizon]` and records everything.
///
/// `seed` selects stream 0 of the seeded generator; identical arguments give
/// bitwise-identical trajectories.
pub fn simulate<P: Policy + ?Sized>(
    sys: &dyn ControlAffineSystem,
    policy: &mut P,
    x0: &DVector<f64>,
    horizon: f64,
    dt: f64,
    seed: u64,
    margins: &[&dyn SafetyFunction],
) -> Result<Trajectory> {
    let steps = step_count(horizon, dt)?;
    let mut rng = stream_rng(seed, 0);
    let mut traj = Trajectory {
        dt,
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps),
        nominal_inputs: Vec::with_capacity(steps),
        margins: Vec::with_capacity(steps + 1),
        feasible_flags: Vec::with_capacity(steps),
    };
    run_closed_loop(sys, policy, x0, steps, dt, &mut rng, |s| {
        traj.times.push(s.t);
        traj.states.push(s.x.clone());
        traj.margins.push(margins.iter().map(|h| h.value(s.x)).collect());
        if let Some(a) = s.action {
            traj.inputs.push(a.u.clone());
            traj.nominal_inputs.push(a.nominal.clone());
            traj.feasible_flags.push(a.feasible);
        }
    })?;
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_policy(m: usize) -> impl FnMut(f64, &DVector<f64>) -> DVector<f64> {
        move |_, _| DVector::zeros(m)
    }

    #[test]
    fn pure_drift_step() {
        let sys = FnSystem::new(
            2,
            2,
            2,
            |_| DVector::zeros(2),
            |_| DMatrix::identity(2, 2),
            |_| DMatrix::zeros(2, 2),
        );
        let x = DVector::from_vec(vec![1.0, 1.0]);
        let u = DVector::from_vec(vec![1.0, -1.0]);
        let next = em_step(&sys, &x, &u, 0.5, &DVector::zeros(2)).unwrap();
        assert_eq!(next.as_slice(), &[1.5, 0.5]);
    }

    #[test]
    fn pure_diffusion_step() {
        let sys = FnSystem::new(
            1,
            1,
            1,
            |_| DVector::zeros(1),
            |_| DMatrix::zeros(1, 1),
            |_| DMatrix::identity(1, 1),
        );
        let next = em_step(
            &sys,
            &DVector::zeros(1),
            &DVector::zeros(1),
            0.01,
            &DVector::from_vec(vec![0.2]),
        )
        .unwrap();
        assert_eq!(next[0], 0.2);
    }

    #[test]
    fn double_integrator_step() {
        let sys = LinearSystem::double_integrator(DMatrix::zeros(2, 1)).unwrap();
        let next = em_step(
            &sys,
            &DVector::from_vec(vec![0.0, 1.0]),
            &DVector::from_vec(vec![2.0]),
            0.1,
            &DVector::zeros(1),
        )
        .unwrap();
        assert!((next[0] - 0.1).abs() < 1e-15);
        assert!((next[1] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn non_finite_step_is_an_error() {
        let sys = FnSystem::new(
            1,
            1,
            1,
            |x| DVector::from_vec(vec![x[0] / 0.0]),
            |_| DMatrix::zeros(1, 1),
            |_| DMatrix::zeros(1, 1),
        );
        let r = em_step(&sys, &DVector::from_vec(vec![1.0]), &DVector::zeros(1), 0.1, &DVector::zeros(1));
        assert!(matches!(r, Err(Error::IntegrationBlowup { .. })));
    }

    #[test]
    fn blowup_guard_reports_step() {
        let sys = FnSystem::new(
            1,
            1,
            1,
            |x| x * 1e3,
            |_| DMatrix::zeros(1, 1),
            |_| DMatrix::zeros(1, 1),
        );
        let err = simulate(&sys, &mut zero_policy(1), &DVector::from_vec(vec![1.0]), 10.0, 0.1, 1, &[])
            .unwrap_err();
        match err {
            Error::IntegrationBlowup { step, norm } => {
                // (1 + 100)^k > 1e9 first at k = 5
                assert_eq!(step, 5);
                assert!(norm > BLOWUP_LIMIT);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wiener_rejects_nonpositive_step() {
        assert!(Wiener::new(3, 0.0).is_err());
        assert!(Wiener::new(3, -1.0).is_err());
    }

    #[test]
    fn increments_reproduce_bitwise() {
        let w = Wiener::new(3, 0.01).unwrap();
        let a = w.increment(&mut stream_rng(7, 0));
        let b = w.increment(&mut stream_rng(7, 0));
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        let c = w.increment(&mut stream_rng(7, 1));
        assert_ne!(a, c);
    }

    #[test]
    fn increment_moments() {
        let w = Wiener::new(1, 0.01).unwrap();
        let mut rng = stream_rng(11, 0);
        let n = 1_000_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let v = w.increment(&mut rng)[0];
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!((var - 0.01).abs() < 3e-4, "variance {var}");

        let w1 = Wiener::new(1, 1.0).unwrap();
        let mut rng = stream_rng(12, 0);
        let mean: f64 = (0..n).map(|_| w1.increment(&mut rng)[0]).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4e-3, "mean {mean}");
    }

    #[test]
    fn constant_trajectory_without_dynamics() {
        let sys = FnSystem::new(
            2,
            1,
            2,
            |_| DVector::zeros(2),
            |_| DMatrix::zeros(2, 1),
            |_| DMatrix::zeros(2, 2),
        );
        let x0 = DVector::from_vec(vec![3.0, -1.0]);
        let traj = simulate(&sys, &mut zero_policy(1), &x0, 1.0, 0.1, 3, &[]).unwrap();
        assert_eq!(traj.steps(), 10);
        assert!(traj.states.iter().all(|x| *x == x0));
    }

    #[test]
    fn trajectory_shape_and_spacing() {
        let sys = FnSystem::scalar_integrator(1.0);
        let traj = simulate(&sys, &mut zero_policy(1), &DVector::zeros(1), 0.5, 0.01, 5, &[]).unwrap();
        assert_eq!(traj.steps(), 50);
        assert_eq!(traj.states.len(), 51);
        assert_eq!(traj.times.len(), 51);
        assert_eq!(traj.feasible_flags.len(), 50);
        for w in traj.times.windows(2) {
            assert!(w[1] > w[0]);
            assert!((w[1] - w[0] - 0.01).abs() < 1e-12);
        }
    }

    #[test]
    fn step_count_rounds_up() {
        assert_eq!(step_count(10.0, 1e-3).unwrap(), 10_000);
        assert_eq!(step_count(1.0, 0.3).unwrap(), 4);
        assert!(step_count(0.0, 0.1).is_err());
        assert!(step_count(1e9, 1e-3).is_err());
    }

    #[test]
    fn pure_drift_matches_explicit_euler() {
        // ẋ = -x + u, u = -0.5 x, σ = 0
        let sys = FnSystem::new(
            1,
            1,
            1,
            |x| -x,
            |_| DMatrix::identity(1, 1),
            |_| DMatrix::zeros(1, 1),
        );
        let mut policy = |_t: f64, x: &DVector<f64>| x * -0.5;
        let traj = simulate(&sys, &mut policy, &DVector::from_vec(vec![2.0]), 1.0, 0.01, 9, &[]).unwrap();
        let mut x = 2.0_f64;
        for state in &traj.states {
            assert_eq!(state[0], x);
            x += (-x - 0.5 * x) * 0.01;
        }
    }
}
