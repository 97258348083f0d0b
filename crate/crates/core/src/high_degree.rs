//! Zero-CBF chains for safety functions of high relative degree.
//!
//! Starting from `h₀ = h`, each level is
//!
//! ```text
//!     h_{i+1}(x) = ∂h_i/∂x f(x) + ½ tr(σᵀ ∂²h_i/∂x² σ) + h_i(x)
//! ```
//!
//! For `f(x) = F x`, constant `σ` and affine `h(x) = a·x − b` every level is
//! affine, `h_i(x) = c_i·x + d_i` with `c_{i+1} = (Fᵀ + I) c_i` and
//! `d_i = −b`. The input enters first at level `r′ = min{l : aᵀFˡG ≠ 0}`.
//!
//! For nonlinear systems the library only evaluates the chain; the
//! requirement `∂h_i/∂x g(x) u ≥ 0` for `i < r` cannot be checked here and
//! is left to the scenario author.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector2, Vector4};

use crate::barrier::{
    AffineInputConstraint, AffineSafety, PairwiseDistance, SafetyFunction, AGENT_STATES,
};
use crate::error::{Error, Result};
use crate::linalg::{diffusion_trace, fd_gradient};
use crate::sde::{ControlAffineSystem, LinearSystem};

/// Smallest `l < n` with `‖aᵀFˡG‖∞ > 1e-9·‖a‖·‖F‖ˡ·‖G‖` (Frobenius norms).
pub fn relative_degree(f: &DMatrix<f64>, g: &DMatrix<f64>, a: &DVector<f64>) -> Result<usize> {
    let n = f.nrows();
    if a.len() != n || g.nrows() != n || f.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "relative degree operands",
            expected: n,
            got: a.len(),
        });
    }
    let (na, nf, ng) = (a.norm(), f.norm(), g.norm());
    let mut row = a.transpose();
    for l in 0..n {
        let v = &row * g;
        let tol = 1e-9 * na * nf.powi(l as i32) * ng;
        if v.iter().any(|e| e.abs() > tol) {
            return Ok(l);
        }
        row = &row * f;
    }
    Err(Error::NoRelativeDegree { n })
}

/// `h_i(x) = c_i·x + d_i` for `i = 0..=depth`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineChain {
    pub coeffs: Vec<DVector<f64>>,
    pub offsets: Vec<f64>,
}

impl AffineChain {
    pub fn depth(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn level(&self, i: usize, x: &DVector<f64>) -> f64 {
        self.coeffs[i].dot(x) + self.offsets[i]
    }

    pub fn top(&self, x: &DVector<f64>) -> f64 {
        self.level(self.depth(), x)
    }

    /// Level `i` as a safety function.
    pub fn level_function(&self, i: usize) -> AffineSafety {
        AffineSafety::new(self.coeffs[i].clone(), -self.offsets[i])
    }
}

/// Closed-form chain for `h = a·x − b` under `dx = F x dt + … + σ dW`.
///
/// Constant `σ` makes every Hessian zero, so `σ` only contributes a shape check.
pub fn build_affine_chain(
    f: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    a: &DVector<f64>,
    b: f64,
    depth: usize,
) -> Result<AffineChain> {
    let n = a.len();
    if f.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            what: "F",
            expected: n,
            got: f.nrows(),
        });
    }
    if sigma.nrows() != n {
        return Err(Error::DimensionMismatch {
            what: "sigma rows",
            expected: n,
            got: sigma.nrows(),
        });
    }
    let lift = f.transpose() + DMatrix::identity(n, n);
    let mut coeffs = Vec::with_capacity(depth + 1);
    coeffs.push(a.clone());
    for i in 0..depth {
        let next = &lift * &coeffs[i];
        coeffs.push(next);
    }
    Ok(AffineChain {
        coeffs,
        offsets: vec![-b; depth + 1],
    })
}

/// Top-level row `c_rᵀG u ≥ −c_rᵀF x − h_r(x)`; lower levels have `c_iᵀG = 0`.
pub fn hrd_constraint(
    chain: &AffineChain,
    sys: &LinearSystem,
    x: &DVector<f64>,
) -> Result<AffineInputConstraint> {
    let c = &chain.coeffs[chain.depth()];
    if c.len() != sys.state_dim() || x.len() != sys.state_dim() {
        return Err(Error::DimensionMismatch {
            what: "chain/system state",
            expected: sys.state_dim(),
            got: c.len(),
        });
    }
    let a = sys.g.transpose() * c;
    let b = -(c.transpose() * &sys.f * x)[0] - chain.top(x);
    AffineInputConstraint::ge(a, b)
}

/// `x ∈ C̄_r`, i.e. every level of the chain is nonnegative.
pub fn membership_cbar(chain: &AffineChain, x: &DVector<f64>) -> bool {
    (0..=chain.depth()).all(|i| chain.level(i, x) >= 0.0)
}

/// One level of the general chain, `h_{i+1}` built from `h_i` numerically.
///
/// Gradients come from central differences of the level value and Hessians
/// from differences of those gradients, so accuracy degrades with depth.
pub struct ChainLevel {
    base: Arc<dyn SafetyFunction>,
    sys: Arc<dyn ControlAffineSystem>,
}

impl ChainLevel {
    pub fn new(base: Arc<dyn SafetyFunction>, sys: Arc<dyn ControlAffineSystem>) -> Self {
        Self { base, sys }
    }
}

impl SafetyFunction for ChainLevel {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.base.grad(x).dot(&self.sys.drift(x))
            + 0.5 * diffusion_trace(&self.sys.diffusion(x), &self.base.hess(x))
            + self.base.value(x)
    }
    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        fd_gradient(|y| self.value(y), x)
    }
}

/// `[h₀, h₁, …, h_depth]` for a general system.
pub fn nonlinear_chain(
    h: Arc<dyn SafetyFunction>,
    sys: Arc<dyn ControlAffineSystem>,
    depth: usize,
) -> Vec<Arc<dyn SafetyFunction>> {
    let mut levels = vec![h];
    for _ in 0..depth {
        let prev = levels.last().cloned().expect("non-empty");
        levels.push(Arc::new(ChainLevel::new(prev, sys.clone())));
    }
    levels
}

/// First chain level of the pairwise distance `h₀ = ‖Δp‖ − D_s − h̄`:
///
/// ```text
///     h₁ = e·Δv + s/‖Δp‖ + ‖Δp‖ − D_s − h̄,    e = Δp/‖Δp‖
/// ```
///
/// where `s` is the position-noise rate. With position diffusion covariance
/// `β_k I₂` for agent `k`, the trace term of the recursion is
/// `½(β_i + β_j)/‖Δp‖`, so `s = (β_i + β_j)/2`. `s = 0` gives the
/// deterministic chain and `h̄` is the estimation shrink (zero with exact
/// state information).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseDistanceChain {
    pub pair: PairwiseDistance,
    pub noise_rate: f64,
    pub shrink: f64,
}

/// Local derivatives of [`PairwiseDistanceChain`] in `(Δp, Δv)` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLocal {
    pub distance: f64,
    pub unit: Vector2<f64>,
    pub rel_velocity: Vector2<f64>,
    pub h0: f64,
    pub h1: f64,
    /// `∂h₁/∂(Δp, Δv)`; agent `i` sees `+grad`, agent `j` sees `−grad`.
    pub grad: Vector4<f64>,
    /// `∂²h₁/∂(Δp, Δv)²`; the agent-level blocks are `±hess`.
    pub hess: Matrix4<f64>,
}

impl PairwiseDistanceChain {
    pub fn new(pair: PairwiseDistance, noise_rate: f64, shrink: f64) -> Self {
        Self {
            pair,
            noise_rate,
            shrink,
        }
    }

    /// The shrunk base level `h₀ = ‖Δp‖ − D_s − h̄`.
    pub fn base_value(&self, x: &DVector<f64>) -> f64 {
        self.pair.value(x) - self.shrink
    }

    pub fn local(&self, x: &DVector<f64>) -> PairLocal {
        let [px, py] = self.pair.relative_position(x);
        let [vx, vy] = self.pair.relative_velocity(x);
        let dp = Vector2::new(px, py);
        let dv = Vector2::new(vx, vy);
        let r = dp.norm();
        let e = dp / r;
        let s = self.noise_rate;
        let ew = e.dot(&dv);
        let xw = dp.dot(&dv);
        let proj = Matrix2::identity() - e * e.transpose();

        let h0 = r - self.pair.safety_distance - self.shrink;
        let h1 = ew + s / r + h0;

        let gx = proj * dv / r - e * (s / (r * r)) + e;
        let grad = Vector4::new(gx[0], gx[1], e[0], e[1]);

        let r3 = r * r * r;
        let r5 = r3 * r * r;
        let outer = dp * dp.transpose();
        let hxx = -(dv * dp.transpose() + dp * dv.transpose()) / r3 - Matrix2::identity() * (xw / r3)
            + outer * (3.0 * xw / r5)
            - (Matrix2::identity() / r3 - outer * (3.0 / r5)) * s
            + proj / r;
        let hxw = proj / r;
        let mut hess = Matrix4::zeros();
        hess.fixed_view_mut::<2, 2>(0, 0).copy_from(&hxx);
        hess.fixed_view_mut::<2, 2>(0, 2).copy_from(&hxw);
        hess.fixed_view_mut::<2, 2>(2, 0).copy_from(&hxw.transpose());

        PairLocal {
            distance: r,
            unit: e,
            rel_velocity: dv,
            h0,
            h1,
            grad,
            hess,
        }
    }

    fn offsets(&self) -> [(usize, f64); 2] {
        [
            (AGENT_STATES * self.pair.i, 1.0),
            (AGENT_STATES * self.pair.j, -1.0),
        ]
    }
}

impl SafetyFunction for PairwiseDistanceChain {
    fn dim(&self) -> usize {
        self.pair.dim()
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.local(x).h1
    }
    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let local = self.local(x);
        let mut g = DVector::zeros(self.dim());
        for (off, sign) in self.offsets() {
            for k in 0..AGENT_STATES {
                g[off + k] = sign * local.grad[k];
            }
        }
        g
    }
    fn hess(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let local = self.local(x);
        let mut h = DMatrix::zeros(self.dim(), self.dim());
        for (oa, sa) in self.offsets() {
            for (ob, sb) in self.offsets() {
                for r in 0..AGENT_STATES {
                    for c in 0..AGENT_STATES {
                        h[(oa + r, ob + c)] = sa * sb * local.hess[(r, c)];
                    }
                }
            }
        }
        h
    }
}

/// The base level `‖Δp‖ − D_s − h̄` as a safety function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftedPairwiseDistance(pub PairwiseDistanceChain);

impl SafetyFunction for ShiftedPairwiseDistance {
    fn dim(&self) -> usize {
        self.0.pair.dim()
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.0.base_value(x)
    }
    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        self.0.pair.grad(x)
    }
    fn hess(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.0.pair.hess(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::zcbf_constraint;
    use crate::linalg::block_diag;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_vec(xs.to_vec())
    }

    fn shift(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |r, c| if c == r + 1 { 1.0 } else { 0.0 })
    }

    fn double_integrator() -> LinearSystem {
        LinearSystem::double_integrator(DMatrix::zeros(2, 1)).unwrap()
    }

    #[test]
    fn relative_degree_examples() {
        let di = double_integrator();
        assert_eq!(relative_degree(&di.f, &di.g, &v(&[1.0, 0.0])).unwrap(), 1);
        assert_eq!(
            relative_degree(&DMatrix::zeros(2, 2), &DMatrix::identity(2, 2), &v(&[1.0, 0.0])).unwrap(),
            0
        );
        let g3 = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0]);
        assert_eq!(relative_degree(&shift(3), &g3, &v(&[1.0, 0.0, 0.0])).unwrap(), 2);
    }

    #[test]
    fn relative_degree_missing() {
        let g = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let err = relative_degree(&DMatrix::zeros(2, 2), &g, &v(&[1.0, 0.0])).unwrap_err();
        assert_eq!(err, Error::NoRelativeDegree { n: 2 });
    }

    #[test]
    fn double_integrator_chain() {
        let di = double_integrator();
        let chain = build_affine_chain(&di.f, &di.sigma, &v(&[1.0, 0.0]), 0.0, 1).unwrap();
        assert_eq!(chain.coeffs[0].as_slice(), &[1.0, 0.0]);
        assert_eq!(chain.coeffs[1].as_slice(), &[1.0, 1.0]);
        assert_eq!(chain.offsets, vec![0.0, 0.0]);
    }

    #[test]
    fn chain_without_drift_is_constant() {
        let chain =
            build_affine_chain(&DMatrix::zeros(3, 3), &DMatrix::zeros(3, 1), &v(&[1.0, 2.0, 3.0]), 5.0, 4)
                .unwrap();
        assert!(chain.coeffs.iter().all(|c| c.as_slice() == [1.0, 2.0, 3.0]));
        assert!(chain.offsets.iter().all(|d| *d == -5.0));
    }

    #[test]
    fn hrd_examples() {
        let di = double_integrator();
        let chain = build_affine_chain(&di.f, &di.sigma, &v(&[1.0, 0.0]), 0.0, 1).unwrap();
        let c = hrd_constraint(&chain, &di, &v(&[2.0, -1.0])).unwrap();
        assert_eq!(c.a[0], 1.0);
        assert_eq!(c.b, 0.0);
        let c = hrd_constraint(&chain, &di, &v(&[2.0, 0.0])).unwrap();
        assert_eq!(c.b, -2.0);
    }

    #[test]
    fn hrd_depth_zero_is_plain_zcbf() {
        let sys = LinearSystem::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 2))
            .unwrap();
        let a = v(&[1.0, 0.0]);
        let chain = build_affine_chain(&sys.f, &sys.sigma, &a, 0.5, 0).unwrap();
        let x = v(&[3.0, -2.0]);
        let hrd = hrd_constraint(&chain, &sys, &x).unwrap();
        let z = zcbf_constraint(&sys, &AffineSafety::new(a, 0.5), &x, 1.0).unwrap();
        assert_eq!(hrd, z);
    }

    #[test]
    fn cbar_membership() {
        let di = double_integrator();
        let chain = build_affine_chain(&di.f, &di.sigma, &v(&[1.0, 0.0]), 0.0, 1).unwrap();
        assert!(membership_cbar(&chain, &v(&[1.0, 0.0])));
        assert!(!membership_cbar(&chain, &v(&[1.0, -2.0])));
        assert!(membership_cbar(&chain, &v(&[0.0, 0.0])));
    }

    #[test]
    fn nonlinear_chain_matches_affine_closed_form() {
        let di = LinearSystem::double_integrator(DMatrix::from_column_slice(2, 1, &[0.3, 0.7])).unwrap();
        let a = v(&[1.0, 0.0]);
        let levels = nonlinear_chain(Arc::new(AffineSafety::new(a.clone(), 2.0)), Arc::new(di.clone()), 1);
        let chain = build_affine_chain(&di.f, &di.sigma, &a, 2.0, 1).unwrap();
        for x in [v(&[1.0, 2.0]), v(&[-3.0, 0.5])] {
            assert!((levels[1].value(&x) - chain.level(1, &x)).abs() < 1e-8);
        }
    }

    fn pair_state() -> DVector<f64> {
        v(&[3.0, 1.0, 0.5, -0.2, -4.0, 2.5, -1.0, 0.4])
    }

    #[test]
    fn pair_chain_matches_numeric_recursion() {
        // stacked double integrators with isotropic position noise
        let (sp, sv) = (0.8, 1.3);
        let block = DMatrix::from_diagonal(&v(&[sp, sp, sv, sv]));
        let sigma = block_diag(&[block.clone(), block]);
        let f_agent = DMatrix::from_row_slice(
            4,
            4,
            &[0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 0., 0., 0., 0.],
        );
        let f = block_diag(&[f_agent.clone(), f_agent]);
        let sys = LinearSystem::new(f, DMatrix::zeros(8, 4), sigma).unwrap();
        let pair = PairwiseDistance::new(0, 1, 2, 2.0);
        let chain = PairwiseDistanceChain::new(pair, sp * sp, 0.0);
        let numeric = ChainLevel::new(Arc::new(pair), Arc::new(sys));
        let x = pair_state();
        assert!((numeric.value(&x) - chain.value(&x)).abs() < 1e-10);
    }

    #[test]
    fn pair_chain_spec_example() {
        // Δp = (d, 0), Δv = (w, 0): h₁ = w + s/d + d − D_s
        let pair = PairwiseDistance::new(0, 1, 2, 10.0);
        let chain = PairwiseDistanceChain::new(pair, 1.0, 0.0);
        let x = v(&[20.0, 0.0, -3.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let expected = -3.0 + 1.0 / 20.0 + 20.0 - 10.0;
        assert!((chain.value(&x) - expected).abs() < 1e-14);
    }

    #[test]
    fn pair_chain_derivatives_match_differences() {
        let pair = PairwiseDistance::new(0, 1, 2, 1.0);
        let chain = PairwiseDistanceChain::new(pair, 0.7, 0.3);
        let x = pair_state();
        let g = chain.grad(&x);
        let g_fd = fd_gradient(|y| chain.value(y), &x);
        assert!((&g - &g_fd).amax() < 1e-7 * g.amax().max(1.0));
        let h = chain.hess(&x);
        let h_fd = crate::linalg::fd_hessian_from_grad(|y| chain.grad(y), &x);
        assert!((&h - &h_fd).amax() < 1e-6 * h.amax().max(1.0));
    }
}
