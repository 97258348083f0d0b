//! Continuous-discrete extended Kalman filter and the estimation-error
//! bookkeeping used by the incomplete-information barriers.
//!
//! Measurements follow `dy = c x dt + ν dW` with `R = ννᵀ ≻ 0`. The filter
//! propagates
//!
//! ```text
//!     dx̂ = (f(x̂) + g(x̂)u) dt + K (dy − c x̂ dt),   K = P cᵀ R⁻¹
//!     Ṗ  = A P + P Aᵀ + Q − P cᵀ R⁻¹ c P,           A = ∂(f + g u)/∂x at x̂
//! ```
//!
//! with `Q = σσᵀ` and the same step size as the plant. Uniform detectability
//! of `(A, c)` is assumed, not checked.

use nalgebra::{DMatrix, DVector};

use crate::barrier::{PairwiseDistance, SafetyFunction};
use crate::error::{Error, Result};
use crate::linalg::{lambda_max, symmetrize};
use crate::sde::ControlAffineSystem;

/// `P₀` used when the initial state is known exactly.
pub const KNOWN_STATE_COVARIANCE: f64 = 1e-12;

/// Linear output `dy = c x dt + ν dW`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    pub c: DMatrix<f64>,
    pub nu: DMatrix<f64>,
    r_inv: DMatrix<f64>,
}

impl ObservationModel {
    pub fn new(c: DMatrix<f64>, nu: DMatrix<f64>) -> Result<Self> {
        if nu.nrows() != c.nrows() {
            return Err(Error::EstimatorConfig(format!(
                "nu has {} rows but c has {}",
                nu.nrows(),
                c.nrows()
            )));
        }
        let r = &nu * nu.transpose();
        let chol = r.clone().cholesky().ok_or_else(|| {
            Error::EstimatorConfig("measurement covariance nu nu^T is not positive definite".into())
        })?;
        Ok(Self {
            c,
            nu,
            r_inv: chol.inverse(),
        })
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn measurement_covariance(&self) -> DMatrix<f64> {
        &self.nu * self.nu.transpose()
    }

    pub fn r_inv(&self) -> &DMatrix<f64> {
        &self.r_inv
    }

    pub fn gain(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        p * self.c.transpose() * &self.r_inv
    }
}

fn invert_spd(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    r.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::EstimatorConfig("R is singular or not positive definite".into()))
}

/// One explicit Euler step of the Riccati equation, symmetrized.
pub fn riccati_step(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
    dt: f64,
) -> Result<DMatrix<f64>> {
    let r_inv = invert_spd(r)?;
    Ok(riccati_step_with_inverse(a, c, q, &r_inv, p, dt))
}

fn riccati_step_with_inverse(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
    p: &DMatrix<f64>,
    dt: f64,
) -> DMatrix<f64> {
    let pct = p * c.transpose();
    let rate = a * p + p * a.transpose() + q - &pct * r_inv * pct.transpose();
    symmetrize(&(p + rate * dt))
}

/// Filter state: estimate, covariance, and the gain `P cᵀ R⁻¹` for `P`.
#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    pub xhat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
}

impl EkfState {
    pub fn new(xhat: DVector<f64>, p: DMatrix<f64>, obs: &ObservationModel) -> Self {
        let k = obs.gain(&p);
        Self { xhat, p, k }
    }

    /// Filter started from an exactly known state.
    pub fn known_initial_state(x0: DVector<f64>, obs: &ObservationModel) -> Self {
        let n = x0.len();
        Self::new(x0, DMatrix::identity(n, n) * KNOWN_STATE_COVARIANCE, obs)
    }

    /// Advances the filter over one step given the measurement increment `dy`.
    pub fn step(
        &mut self,
        sys: &dyn ControlAffineSystem,
        obs: &ObservationModel,
        u: &DVector<f64>,
        dy: &DVector<f64>,
        dt: f64,
    ) -> Result<()> {
        *self = ekf_step(self, sys, obs, u, dy, dt)?;
        Ok(())
    }
}

/// One filter step. The estimate uses the gain of the current covariance;
/// the returned state carries the gain of the propagated covariance.
pub fn ekf_step(
    ekf: &EkfState,
    sys: &dyn ControlAffineSystem,
    obs: &ObservationModel,
    u: &DVector<f64>,
    dy: &DVector<f64>,
    dt: f64,
) -> Result<EkfState> {
    if dy.len() != obs.output_dim() {
        return Err(Error::DimensionMismatch {
            what: "measurement increment",
            expected: obs.output_dim(),
            got: dy.len(),
        });
    }
    let xhat = &ekf.xhat;
    let innovation = dy - &obs.c * xhat * dt;
    let next_xhat =
        xhat + (sys.drift(xhat) + sys.input_map(xhat) * u) * dt + &ekf.k * innovation;
    let a = sys.closed_loop_jacobian(xhat, u);
    let sigma = sys.diffusion(xhat);
    let q = &sigma * sigma.transpose();
    let p = riccati_step_with_inverse(&a, &obs.c, &q, obs.r_inv(), &ekf.p, dt);
    let k = obs.gain(&p);
    Ok(EkfState {
        xhat: next_xhat,
        p,
        k,
    })
}

/// Error radius `γ = √(n λ* / ε)` for a linear plant.
pub fn gamma_lti(lambda_star: f64, n: usize, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Config(format!("eps must lie in (0, 1), got {eps}")));
    }
    if !(lambda_star >= 0.0) {
        return Err(Error::Config(format!(
            "lambda_star must be nonnegative, got {lambda_star}"
        )));
    }
    Ok((n as f64 * lambda_star / eps).sqrt())
}

/// Running maximum of `λ_max(P_t)` over `steps` Riccati steps from `p0`,
/// for a plant whose Jacobian `a` is constant.
pub fn calibrate_lambda_star(
    a: &DMatrix<f64>,
    obs: &ObservationModel,
    q: &DMatrix<f64>,
    p0: &DMatrix<f64>,
    dt: f64,
    steps: usize,
) -> f64 {
    let mut p = p0.clone();
    let mut peak = lambda_max(&p);
    for _ in 0..steps {
        p = riccati_step_with_inverse(a, &obs.c, q, obs.r_inv(), &p, dt);
        peak = peak.max(lambda_max(&p));
    }
    peak
}

/// Calibrated `λ*` together with the horizon it was taken over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaCalibration {
    pub lambda_star: f64,
    /// Slowest time constant of the steady-state error dynamics `A − K c`.
    pub time_constant: f64,
    pub horizon: f64,
}

/// Number of error time constants the calibration run covers.
pub const CALIBRATION_TIME_CONSTANTS: f64 = 5.0;

/// Iterates the Riccati step until `P` stops moving (or `max_steps`).
pub fn settle_riccati(
    a: &DMatrix<f64>,
    obs: &ObservationModel,
    q: &DMatrix<f64>,
    p0: &DMatrix<f64>,
    dt: f64,
    max_steps: usize,
) -> DMatrix<f64> {
    let mut p = p0.clone();
    for _ in 0..max_steps {
        let next = riccati_step_with_inverse(a, &obs.c, q, obs.r_inv(), &p, dt);
        let moved = (&next - &p).amax();
        p = next;
        if moved <= 1e-13 * (1.0 + p.amax()) {
            break;
        }
    }
    p
}

/// `1 / min |Re λ(A − P cᵀR⁻¹c)|`; infinite when the error dynamics do not decay.
pub fn error_time_constant(a: &DMatrix<f64>, obs: &ObservationModel, p: &DMatrix<f64>) -> f64 {
    let closed = a - obs.gain(p) * &obs.c;
    let slowest = closed
        .complex_eigenvalues()
        .iter()
        .map(|l| -l.re)
        .fold(f64::INFINITY, f64::min);
    if slowest > 0.0 {
        1.0 / slowest
    } else {
        f64::INFINITY
    }
}

/// Running max of `λ_max(P)` from `p0` over five steady-state error time constants.
pub fn calibrate_lambda_star_auto(
    a: &DMatrix<f64>,
    obs: &ObservationModel,
    q: &DMatrix<f64>,
    p0: &DMatrix<f64>,
    dt: f64,
) -> Result<LambdaCalibration> {
    let settle_steps = (1e3 / dt).ceil().min(1e8) as usize;
    let steady = settle_riccati(a, obs, q, p0, dt, settle_steps);
    let time_constant = error_time_constant(a, obs, &steady);
    if !time_constant.is_finite() {
        return Err(Error::EstimatorConfig(
            "estimation error does not decay; (A, c) looks undetectable".into(),
        ));
    }
    let horizon = CALIBRATION_TIME_CONSTANTS * time_constant;
    let steps = (horizon / dt).ceil() as usize;
    Ok(LambdaCalibration {
        lambda_star: calibrate_lambda_star(a, obs, q, p0, dt, steps),
        time_constant,
        horizon,
    })
}

/// Which closed form to use for `h̄_γ`.
#[derive(Debug, Clone, PartialEq)]
pub enum ShrinkKind {
    /// `h(x) = a·x − b`: `h̄_γ = γ‖a‖₂`.
    Affine { a: DVector<f64> },
    /// `h = ‖p_i − p_j‖ − D_s`: `h̄_γ = γ‖M‖₂ = γ√2`.
    PairwiseDistance(PairwiseDistance),
    /// No closed form is known.
    Other,
}

/// `ĥ = h − h̄_γ`, the safety function tightened for estimation error.
#[derive(Clone)]
pub struct ShrunkSafety<H> {
    pub base: H,
    pub gamma: f64,
    pub hbar_gamma: f64,
}

impl<H: SafetyFunction> ShrunkSafety<H> {
    /// Explicit shrink for safety functions without a closed form.
    pub fn with_hbar(base: H, gamma: f64, hbar_gamma: f64) -> Result<Self> {
        if !(hbar_gamma >= 0.0) {
            return Err(Error::Config(format!(
                "hbar_gamma must be nonnegative, got {hbar_gamma}"
            )));
        }
        Ok(Self {
            base,
            gamma,
            hbar_gamma,
        })
    }
}

impl<H: std::fmt::Debug> std::fmt::Debug for ShrunkSafety<H> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShrunkSafety")
            .field("base", &self.base)
            .field("gamma", &self.gamma)
            .field("hbar_gamma", &self.hbar_gamma)
            .finish()
    }
}

/// Worst-case growth of `h` over a `γ`-ball around its zero set.
pub fn hbar_gamma(kind: &ShrinkKind, gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("gamma must be nonnegative, got {gamma}")));
    }
    match kind {
        ShrinkKind::Affine { a } => Ok(gamma * a.norm()),
        ShrinkKind::PairwiseDistance(_) => Ok(gamma * std::f64::consts::SQRT_2),
        ShrinkKind::Other => Err(Error::UnsupportedShrink),
    }
}

pub fn shrink<H: SafetyFunction>(h: H, kind: &ShrinkKind, gamma: f64) -> Result<ShrunkSafety<H>> {
    let hbar = hbar_gamma(kind, gamma)?;
    Ok(ShrunkSafety {
        base: h,
        gamma,
        hbar_gamma: hbar,
    })
}

impl<H: SafetyFunction> SafetyFunction for ShrunkSafety<H> {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.base.value(x) - self.hbar_gamma
    }
    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        self.base.grad(x)
    }
    fn hess(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.base.hess(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::AffineSafety;
    use crate::sde::{FnSystem, LinearSystem};

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_riccati_fixed_point() {
        let p = riccati_step(&s(0.0), &s(1.0), &s(1.0), &s(1.0), &s(1.0), 0.01).unwrap();
        assert!((p[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn riccati_without_terms_is_identity() {
        let p0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let p = riccati_step(
            &DMatrix::zeros(2, 2),
            &DMatrix::zeros(1, 2),
            &DMatrix::zeros(2, 2),
            &s(1.0),
            &p0,
            0.1,
        )
        .unwrap();
        assert_eq!(p, p0);
    }

    #[test]
    fn scalar_riccati_converges_to_sqrt_qr() {
        let mut p = s(0.0);
        for _ in 0..20_000 {
            p = riccati_step(&s(0.0), &s(1.0), &s(4.0), &s(1.0), &p, 1e-3).unwrap();
        }
        assert!((p[(0, 0)] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn singular_r_is_config_error() {
        let err = riccati_step(&s(0.0), &s(1.0), &s(1.0), &s(0.0), &s(1.0), 0.1).unwrap_err();
        assert!(matches!(err, Error::EstimatorConfig(_)));
        assert!(ObservationModel::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn zero_gain_is_open_loop_prediction() {
        let sys = FnSystem::new(
            1,
            1,
            1,
            |x| x * -0.5,
            |_| DMatrix::identity(1, 1),
            |_| DMatrix::zeros(1, 1),
        );
        let obs = ObservationModel::new(s(1.0), s(1.0)).unwrap();
        let ekf = EkfState {
            xhat: DVector::from_vec(vec![2.0]),
            p: s(0.0),
            k: s(0.0),
        };
        let u = DVector::from_vec(vec![1.0]);
        let next = ekf_step(&ekf, &sys, &obs, &u, &DVector::from_vec(vec![100.0]), 0.1).unwrap();
        assert!((next.xhat[0] - (2.0 + (-1.0 + 1.0) * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn estimate_converges_geometrically() {
        // static plant x ≡ 1 observed without noise, K held at 1
        let sys = FnSystem::new(
            1,
            1,
            1,
            |_| DVector::zeros(1),
            |_| DMatrix::zeros(1, 1),
            |_| DMatrix::zeros(1, 1),
        );
        let obs = ObservationModel::new(s(1.0), s(1.0)).unwrap();
        let dt = 1e-3;
        let mut ekf = EkfState::new(DVector::zeros(1), s(1.0), &obs);
        for _ in 0..1000 {
            let mut next = ekf_step(&ekf, &sys, &obs, &DVector::zeros(1), &DVector::from_vec(vec![dt]), dt)
                .unwrap();
            next.k = s(1.0);
            next.p = s(1.0);
            ekf = next;
        }
        // x̂(t) = 1 − (1 − dt)^(t/dt) ≈ 1 − e^{−t} at t = 1
        let exact = 1.0 - (1.0 - dt).powi(1000);
        assert!((ekf.xhat[0] - exact).abs() < 1e-12);
        assert!((ekf.xhat[0] - (1.0 - (-1.0f64).exp())).abs() < 1e-3);
    }

    #[test]
    fn covariance_stays_symmetric_psd() {
        let sys = LinearSystem::double_integrator(DMatrix::identity(2, 2)).unwrap();
        let obs = ObservationModel::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
        let mut ekf = EkfState::known_initial_state(DVector::zeros(2), &obs);
        for _ in 0..5000 {
            ekf.step(&sys, &obs, &DVector::zeros(1), &DVector::zeros(2), 1e-3).unwrap();
            assert_eq!(ekf.p, ekf.p.transpose());
            assert!(crate::linalg::lambda_min(&ekf.p) >= -1e-8);
        }
    }

    #[test]
    fn scalar_calibration() {
        // A = 0, c = 1, Q = 4, R = 1: P* = 2, error rate P*/R = 2
        let obs = ObservationModel::new(s(1.0), s(1.0)).unwrap();
        let cal = calibrate_lambda_star_auto(&s(0.0), &obs, &s(4.0), &s(1e-12), 1e-3).unwrap();
        assert!((cal.time_constant - 0.5).abs() < 1e-6);
        assert!((cal.horizon - 2.5).abs() < 1e-5);
        // P(t) = 2 tanh(2t) from P₀ ≈ 0
        assert!((cal.lambda_star - 2.0 * (5.0f64).tanh()).abs() < 1e-3);
    }

    #[test]
    fn double_integrator_steady_state() {
        let sys = LinearSystem::double_integrator(DMatrix::identity(2, 2)).unwrap();
        let obs = ObservationModel::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
        let p = settle_riccati(&sys.f, &obs, &DMatrix::identity(2, 2), &DMatrix::zeros(2, 2), 1e-3, 1_000_000);
        // algebraic Riccati residual
        let res = &sys.f * &p + &p * sys.f.transpose() + DMatrix::identity(2, 2) - &p * &p;
        assert!(res.amax() < 1e-6);
    }

    #[test]
    fn undetectable_pair_is_rejected() {
        let obs = ObservationModel::new(s(0.0), s(1.0)).unwrap();
        assert!(calibrate_lambda_star_auto(&s(0.0), &obs, &s(1.0), &s(0.0), 1e-2).is_err());
    }

    #[test]
    fn gamma_formula() {
        assert!((gamma_lti(1.0, 4, 0.04).unwrap() - 10.0).abs() < 1e-12);
        assert!((gamma_lti(1.0, 1, 0.1).unwrap() - 10f64.sqrt()).abs() < 1e-12);
        assert!((gamma_lti(2.0, 3, 1.0 - 1e-12).unwrap() - 6f64.sqrt()).abs() < 1e-9);
        assert!(gamma_lti(1.0, 1, 0.0).is_err());
        assert!(gamma_lti(1.0, 1, 1.0).is_err());
    }

    #[test]
    fn affine_shrink() {
        let a = DVector::from_vec(vec![0.6, 0.8]);
        let h = AffineSafety::new(a.clone(), 0.0);
        let shrunk = shrink(h, &ShrinkKind::Affine { a }, 2.0).unwrap();
        assert!((shrunk.hbar_gamma - 2.0).abs() < 1e-15);
        let x = DVector::from_vec(vec![3.0, 1.0]);
        assert!((shrunk.value(&x) - (2.6 - 2.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_gamma_is_identity() {
        let pair = PairwiseDistance::new(0, 1, 2, 10.0);
        let shrunk = shrink(pair, &ShrinkKind::PairwiseDistance(pair), 0.0).unwrap();
        let x = DVector::from_vec(vec![1.0, 2.0, 0.0, 0.0, 20.0, 4.0, 0.0, 0.0]);
        assert_eq!(shrunk.value(&x), pair.value(&x));
    }

    #[test]
    fn pairwise_shrink_is_sqrt2_gamma() {
        let pair = PairwiseDistance::new(0, 1, 2, 10.0);
        let shrunk = shrink(pair, &ShrinkKind::PairwiseDistance(pair), 1.0).unwrap();
        let x = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 30.0, 40.0, 0.0, 0.0]);
        assert!((shrunk.value(&x) - (50.0 - 10.0 - 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn unsupported_shrink() {
        let h = AffineSafety::new(DVector::from_vec(vec![1.0]), 0.0);
        assert!(matches!(shrink(h, &ShrinkKind::Other, 1.0), Err(Error::UnsupportedShrink)));
        let h = AffineSafety::new(DVector::from_vec(vec![1.0]), 0.0);
        assert!(ShrunkSafety::with_hbar(h, 1.0, 0.25).is_ok());
    }
}
