//! Analytic reverse-mode differentiation of unrolled blocks: single-step and
//! block VJPs, forward-mode block tangents, dense Jacobian assembly for
//! small problems, and central finite-difference oracles.
//!
//! All theta-gradients here live in the effective (positive) parameter
//! space; trainers working in log coordinates apply the exponential chain
//! factor afterwards.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::scheme::ElementaryStep;

/// Guard for dense Jacobian assembly.
pub const DENSE_STATE_LIMIT: usize = 512;

/// Adjoint pair produced by pulling a state cotangent through a step or a
/// block: the state part v^T d_x Phi and the parameter part v^T d_theta Phi.
#[derive(Debug, Clone)]
pub struct Cotangent {
    pub wrt_x: Vec<f64>,
    pub wrt_theta: Vec<f64>,
}

impl Cotangent {
    /// Map the parameter part to log-space via the chain factor theta.
    pub fn theta_log_space(&self, theta: &[f64]) -> Vec<f64> {
        crate::core::grad_to_log_space(&self.wrt_theta, theta)
    }
}

/// Pull `v` back through one elementary step.
pub fn step_vjp<S: ElementaryStep>(step: &S, x: &[f64], theta: &[f64], v: &[f64]) -> Cotangent {
    let (wrt_x, wrt_theta) = step.vjp(x, theta, v);
    Cotangent { wrt_x, wrt_theta }
}

/// Reverse sweep over a stored trajectory [x_0, ..., x_K]: propagates
/// v_{k-1} = v_k^T d_x phi(x_{k-1}) while accumulating the per-step
/// parameter contributions. Returns v^T d_x Phi_K and v^T d_theta Phi_K.
pub fn block_vjp<S: ElementaryStep>(
    step: &S,
    trajectory: &[Vec<f64>],
    theta: &[f64],
    v: &[f64],
) -> Cotangent {
    debug_assert!(!trajectory.is_empty());
    let k = trajectory.len() - 1;
    let mut cur = v.to_vec();
    let mut acc = vec![0.0; step.theta_dim()];
    for i in (0..k).rev() {
        let (wx, wt) = step.vjp(&trajectory[i], theta, &cur);
        for (a, b) in acc.iter_mut().zip(&wt) {
            *a += b;
        }
        cur = wx;
    }
    Cotangent { wrt_x: cur, wrt_theta: acc }
}

/// State-only reverse sweep (the parameter accumulation skipped).
pub fn block_vjp_state<S: ElementaryStep>(
    step: &S,
    trajectory: &[Vec<f64>],
    theta: &[f64],
    v: &[f64],
) -> Vec<f64> {
    let k = trajectory.len() - 1;
    let mut cur = v.to_vec();
    for i in (0..k).rev() {
        let (wx, _) = step.vjp(&trajectory[i], theta, &cur);
        cur = wx;
    }
    cur
}

/// Forward sweep of a (state, parameter) tangent along a stored trajectory:
/// t_{k+1} = d_x phi . t_k + d_theta phi . t_theta.
pub fn block_jvp<S: ElementaryStep>(
    step: &S,
    trajectory: &[Vec<f64>],
    theta: &[f64],
    tx0: &[f64],
    t_theta: &[f64],
) -> Vec<f64> {
    let k = trajectory.len() - 1;
    let mut t = tx0.to_vec();
    for state in trajectory.iter().take(k) {
        t = step.jvp(state, theta, &t, t_theta);
    }
    t
}

/// Dense d_x Phi_K at a point (rows assembled from unit-vector VJPs over the
/// constant trajectory at that point). Guarded to small state dimensions.
pub fn dense_state_jacobian<S: ElementaryStep>(
    step: &S,
    x: &[f64],
    theta: &[f64],
    k: usize,
) -> Result<DMatrix<f64>> {
    let n = step.state_dim();
    if n > DENSE_STATE_LIMIT {
        return Err(Error::DenseGuard { n, max: DENSE_STATE_LIMIT });
    }
    let trajectory = crate::scheme::unroll_k(step, x, theta, k);
    let mut jac = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for i in 0..n {
        e[i] = 1.0;
        let row = block_vjp_state(step, &trajectory, theta, &e);
        for j in 0..n {
            jac[(i, j)] = row[j];
        }
        e[i] = 0.0;
    }
    Ok(jac)
}

/// Dense d_theta Phi_K at a point, one forward tangent per parameter.
pub fn dense_theta_jacobian<S: ElementaryStep>(
    step: &S,
    trajectory: &[Vec<f64>],
    theta: &[f64],
) -> DMatrix<f64> {
    let n = step.state_dim();
    let d = step.theta_dim();
    let mut jac = DMatrix::zeros(n, d);
    let zero = vec![0.0; n];
    let mut e = vec![0.0; d];
    for j in 0..d {
        e[j] = 1.0;
        let col = block_jvp(step, trajectory, theta, &zero, &e);
        for i in 0..n {
            jac[(i, j)] = col[i];
        }
        e[j] = 0.0;
    }
    jac
}

/// Central finite differences of a scalar function of theta.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: F, theta: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; theta.len()];
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let fp = f(&probe);
        probe[i] = theta[i] - h;
        let fm = f(&probe);
        probe[i] = theta[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Relative l2 distance used by the finite-difference comparisons.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    num / den.max(1e-300)
}
