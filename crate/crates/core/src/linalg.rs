//! Small dense helpers shared by the barrier, estimator and scenario code.

use nalgebra::{DMatrix, DVector};

/// Central-difference step `eps^(1/3) * max(1, ‖x‖)`.
pub fn fd_step(x: &DVector<f64>) -> f64 {
    f64::EPSILON.cbrt() * x.norm().max(1.0)
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient<F>(f: F, x: &DVector<f64>) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let step = fd_step(x);
    let mut probe = x.clone();
    DVector::from_fn(x.len(), |k, _| {
        let orig = probe[k];
        probe[k] = orig + step;
        let up = f(&probe);
        probe[k] = orig - step;
        let down = f(&probe);
        probe[k] = orig;
        (up - down) / (2.0 * step)
    })
}

/// Central-difference Hessian built from an analytic gradient, symmetrized.
pub fn fd_hessian_from_grad<G>(grad: G, x: &DVector<f64>) -> DMatrix<f64>
where
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let step = fd_step(x);
    let mut probe = x.clone();
    let mut hess = DMatrix::zeros(n, n);
    for k in 0..n {
        let orig = probe[k];
        probe[k] = orig + step;
        let up = grad(&probe);
        probe[k] = orig - step;
        let down = grad(&probe);
        probe[k] = orig;
        hess.set_column(k, &((up - down) / (2.0 * step)));
    }
    symmetrize(&hess)
}

/// Central-difference Hessian from function values only, step `eps^(1/4) * max(1, ‖x‖)`.
pub fn fd_hessian<F>(f: F, x: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let n = x.len();
    let step = f64::EPSILON.powf(0.25) * x.norm().max(1.0);
    let mut probe = x.clone();
    let mut hess = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let (xa, xb) = (probe[a], probe[b]);
            let mut eval = |da: f64, db: f64| {
                probe[a] += da;
                probe[b] += db;
                let v = f(&probe);
                probe[a] = xa;
                probe[b] = xb;
                v
            };
            let value = (eval(step, step) - eval(step, -step) - eval(-step, step)
                + eval(-step, -step))
                / (4.0 * step * step);
            hess[(a, b)] = value;
            hess[(b, a)] = value;
        }
    }
    hess
}

/// Central-difference Jacobian of a vector function.
pub fn fd_jacobian<F>(f: F, x: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let step = fd_step(x);
    let mut probe = x.clone();
    let rows = f(x).len();
    let mut jac = DMatrix::zeros(rows, x.len());
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + step;
        let up = f(&probe);
        probe[k] = orig - step;
        let down = f(&probe);
        probe[k] = orig;
        jac.set_column(k, &((up - down) / (2.0 * step)));
    }
    jac
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `tr(Sᵀ H S)` without forming the product.
pub fn diffusion_trace(sigma: &DMatrix<f64>, hess: &DMatrix<f64>) -> f64 {
    let hs = hess * sigma;
    sigma.component_mul(&hs).sum()
}

/// Largest eigenvalue of a symmetric matrix.
pub fn lambda_max(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn inf_norm(x: &DVector<f64>) -> f64 {
    x.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Block-diagonal matrix from equally sized square or rectangular blocks.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_matches_dense_product() {
        let s = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -2.0, 0.0, 0.3, 1.0]);
        let h = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, -1.0, 0.5, 0.0, 0.5, 3.0]);
        let dense = (s.transpose() * &h * &s).trace();
        assert!((diffusion_trace(&s, &h) - dense).abs() < 1e-12);
    }

    #[test]
    fn fd_hessian_of_quadratic() {
        let f = |x: &DVector<f64>| x[0] * x[0] + 3.0 * x[0] * x[1] - x[1] * x[1];
        let h = fd_hessian(f, &DVector::from_vec(vec![0.3, -0.7]));
        assert!((h[(0, 0)] - 2.0).abs() < 1e-6);
        assert!((h[(0, 1)] - 3.0).abs() < 1e-6);
        assert!((h[(1, 1)] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn block_diag_layout() {
        let a = DMatrix::from_element(1, 2, 1.0);
        let b = DMatrix::from_element(2, 1, 2.0);
        let m = block_diag(&[a, b]);
        assert_eq!(m.shape(), (3, 3));
        assert_eq!(m[(0, 1)], 1.0);
        assert_eq!(m[(2, 2)], 2.0);
        assert_eq!(m[(1, 0)], 0.0);
    }
}
