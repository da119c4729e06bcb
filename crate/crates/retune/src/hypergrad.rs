//! The five hypergradient estimators and their side-by-side comparison:
//! exact equilibrium differentiation (dense solve of the fixed-point linear
//! system), Neumann truncation of that inverse, the Jacobian-free step, full
//! truncated backpropagation from a fixed start, and the restarted
//! Jacobian-free step that differentiates only the last block.

use nalgebra::{DMatrix, DVector};

use crate::core::grad_to_log_space;
use crate::diff::{
    block_jvp, block_vjp, block_vjp_state, dense_state_jacobian, DENSE_STATE_LIMIT,
};
use crate::error::{Error, Result};
use crate::linalg::operator_norm_power;
use crate::scheme::{fixed_point_solve, restart_t, unroll_k, ElementaryStep, SchemeSpec};

/// Outer objective evaluated on the scheme's state. `grad_theta_direct`
/// carries any dependence of the loss on theta that bypasses the state (the
/// wavelet trainer's reconstruction map); it is zero for plain state losses.
pub trait OuterLoss: Sync {
    fn value(&self, x: &[f64], theta: &[f64]) -> f64;
    fn grad_state(&self, x: &[f64], theta: &[f64]) -> Vec<f64>;
    fn grad_theta_direct(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
        let _ = x;
        vec![0.0; theta.len()]
    }
    /// ||d_xx L||_2, used when assembling the restart error bound.
    fn hessian_norm(&self) -> f64;
}

/// (1/2)||x - target||^2 on the state itself; gradient x - target,
/// Hessian the identity.
#[derive(Debug, Clone)]
pub struct SquaredError {
    pub target: Vec<f64>,
}

impl OuterLoss for SquaredError {
    fn value(&self, x: &[f64], _theta: &[f64]) -> f64 {
        crate::core::half_sq_norm_diff(x, &self.target)
    }

    fn grad_state(&self, x: &[f64], _theta: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.target).map(|(a, b)| a - b).collect()
    }

    fn hessian_norm(&self) -> f64 {
        1.0
    }
}

fn add(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Solve the inner problem to the given tolerance from x0.
pub fn solve_equilibrium<S: ElementaryStep>(
    spec: &SchemeSpec<S>,
    theta: &[f64],
    x0: &[f64],
    tol: f64,
) -> Result<Vec<f64>> {
    fixed_point_solve(spec, theta, x0, tol)
}

/// Exact equilibrium hypergradient: w solves (I - J^T) w = d_x L(xhat) with
/// J the dense state Jacobian of the block at the fixed point, and the
/// parameter pullback is taken with v = w.
pub fn g_deq_exact<S: ElementaryStep, L: OuterLoss + ?Sized>(
    spec: &SchemeSpec<S>,
    theta: &[f64],
    loss: &L,
    xhat: &[f64],
) -> Result<Vec<f64>> {
    let n = spec.step.state_dim();
    if n > DENSE_STATE_LIMIT {
        return Err(Error::DenseGuard { n, max: DENSE_STATE_LIMIT });
    }
    let jac = dense_state_jacobian(&spec.step, xhat, theta, spec.k)?;
    let system = DMatrix::identity(n, n) - jac.transpose();
    let rhs = DVector::from_column_slice(&loss.grad_state(xhat, theta));
    let w = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("I - J^T not invertible".into()))?;
    let trajectory = unroll_k(&spec.step, xhat, theta, spec.k);
    let mut g = block_vjp(&spec.step, &trajectory, theta, w.as_slice()).wrt_theta;
    add(&mut g, &loss.grad_theta_direct(xhat, theta));
    Ok(g)
}

/// Neumann-truncated hypergradient: v_P = sum_{p=0..P} (J^T)^p d_x L(xhat)
/// accumulated by repeated state VJPs, then one parameter pullback.
pub fn g_neumann<S: ElementaryStep, L: OuterLoss + ?Sized>(
    spec: &SchemeSpec<S>,
    theta: &[f64],
    loss: &L,
    xhat: &[f64],
    order: usize,
) -> Vec<f64> {
    let trajectory = unroll_k(&spec.step, xhat, theta, spec.k);
    let b = loss.grad_state(xhat, theta);
    let mut term = b.clone();
    let mut v = b;
    for _ in 0..order {
        term = block_vjp_state(&spec.step, &trajectory, theta, &term);
        add(&mut v, &term);
    }
    let mut g = block_vjp(&spec.step, &trajectory, theta, &v).wrt_theta;
    add(&mut g, &loss.grad_theta_direct(xhat, theta));
    g
}

/// Jacobian-free hypergradient at the fixed point (Neumann order zero).
pub fn g_jfb<S: ElementaryStep, L: OuterLoss + ?Sized>(
    spec: &SchemeSpec<S>,
    theta: &[f64],
    loss: &L,
    xhat: &[f64],
) -> Vec<f64> {
    g_neumann(spec, theta, loss, xhat, 0)
}

/// Full truncated backpropagation through all K steps from a fixed x0.
pub fn g_trunc<S: ElementaryStep, L: OuterLoss + ?Sized>(
    spec: &SchemeSpec<S>,
    theta: &[f64],
    loss: &L,
    x0: &[f64],
) -> Vec<f64> {
    let trajectory = unroll_k(&spec.step, x0, theta, spec.k);
    let xk = trajectory.last().unwrap();
    let v = loss.grad_state(xk, theta);
    let mut g = block_vjp(&spec.step, &trajectory, theta, &v).wrt_theta;
    add(&mut g, &loss.grad_theta_direct(xk, theta));
    g
}

/// Restarted Jacobian-free hypergradient: run T-1 blocks without
/// differentiation, then backpropagate through the final block only.
pub fn g_retune<S: ElementaryStep, L: OuterLoss + ?Sized>(
    spec: &SchemeSpec<S>,
    theta: &[f64],
    loss: &L,
    x0: &[f64],
) -> Vec<f64> {
    let (x_prev, _) = restart_t(spec, x0, theta);
    let trajectory = unroll_k(&spec.step, &x_prev, theta, spec.k);
    let x_last = trajectory.last().unwrap();
    let v = loss.grad_state(x_last, theta);
    let mut g = block_vjp(&spec.step, &trajectory, theta, &v).wrt_theta;
    add(&mut g, &loss.grad_theta_direct(x_last, theta));
    g
}

/// Spectral norm of d_theta Phi_K at a trajectory start, by power iteration
/// on the composed JVP/VJP pair (deterministic for a fixed seed).
pub fn theta_sensitivity_norm<S: ElementaryStep>(
    step: &S,
    trajectory: &[Vec<f64>],
    theta: &[f64],
    iters: usize,
    tol: f64,
    seed: u64,
) -> f64 {
    let n = step.state_dim();
    let zero = vec![0.0; n];
    operator_norm_power(
        |t| block_jvp(step, trajectory, theta, &zero, t),
        |w| block_vjp(step, trajectory, theta, w).wrt_theta,
        step.theta_dim(),
        iters,
        tol,
        seed,
    )
}

/// Which gradient serves as the reference in a comparison report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKind {
    DeqExact,
    Neumann(usize),
}

/// A gradient in both parameterizations.
#[derive(Debug, Clone)]
pub struct GradientPair {
    pub theta_space: Vec<f64>,
    pub log_space: Vec<f64>,
}

impl GradientPair {
    fn new(theta_space: Vec<f64>, theta: &[f64]) -> Self {
        let log_space = grad_to_log_space(&theta_space, theta);
        Self { theta_space, log_space }
    }
}

/// Side-by-side estimator values at one parameter point, with the pairwise
/// errors measured in effective-theta space. The bound fields are filled by
/// the certification layer.
#[derive(Debug, Clone)]
pub struct HypergradReport {
    pub theta: Vec<f64>,
    pub delta_k: Option<f64>,
    pub reference: ReferenceKind,
    pub g_deq: Option<GradientPair>,
    pub g_neumann: GradientPair,
    pub p_neumann: usize,
    pub g_jfb: GradientPair,
    pub g_trunc: GradientPair,
    pub g_retune: GradientPair,
    pub err_jfb: f64,
    pub err_retune: f64,
    pub bound_jfb: Option<f64>,
    pub bound_retune: Option<f64>,
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Compute every estimator at the given point. The reference gradient is the
/// dense equilibrium solve when the state fits the dense guard, otherwise a
/// deep Neumann truncation.
pub fn compare_estimators<S: ElementaryStep, L: OuterLoss + ?Sized>(
    spec: &SchemeSpec<S>,
    theta: &[f64],
    loss: &L,
    x0: &[f64],
    p_neumann: usize,
    tol: f64,
) -> Result<HypergradReport> {
    let xhat = solve_equilibrium(spec, theta, x0, tol)?;
    let cert = spec.certificate(theta);
    let delta_k = cert.map(|c| c.delta_k);
    let (reference, g_ref, g_deq) = if spec.step.state_dim() <= DENSE_STATE_LIMIT {
        let g = g_deq_exact(spec, theta, loss, &xhat)?;
        (ReferenceKind::DeqExact, g.clone(), Some(g))
    } else {
        // Deep enough that delta_K^(P+1) is negligible, capped for safety.
        let p_ref = match delta_k {
            Some(d) if d < 1.0 && d > 0.0 => {
                ((1e-14f64.ln() / d.ln()).ceil() as usize).clamp(p_neumann + 1, 400)
            }
            _ => 200,
        };
        (ReferenceKind::Neumann(p_ref), g_neumann(spec, theta, loss, &xhat, p_ref), None)
    };
    let gn = g_neumann(spec, theta, loss, &xhat, p_neumann);
    let gj = g_jfb(spec, theta, loss, &xhat);
    let gt = g_trunc(spec, theta, loss, x0);
    let gr = g_retune(spec, theta, loss, x0);
    let err_jfb = l2_dist(&g_ref, &gj);
    let err_retune = l2_dist(&g_ref, &gr);
    Ok(HypergradReport {
        theta: theta.to_vec(),
        delta_k,
        reference,
        g_deq: g_deq.map(|g| GradientPair::new(g, theta)),
        g_neumann: GradientPair::new(gn, theta),
        p_neumann,
        g_jfb: GradientPair::new(gj, theta),
        g_trunc: GradientPair::new(gt, theta),
        g_retune: GradientPair::new(gr, theta),
        err_jfb,
        err_retune,
        bound_jfb: None,
        bound_retune: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{fd_gradient, relative_error};
    use crate::models::ScalarStep;
    use crate::scheme::SchemeSpec;

    fn scalar_spec(k: usize, t: usize) -> SchemeSpec<ScalarStep> {
        SchemeSpec::new(ScalarStep { y: 1.0, tau: 0.5 }, k, t)
    }

    fn scalar_loss() -> SquaredError {
        SquaredError { target: vec![0.0] }
    }

    #[test]
    fn scalar_documented_values() {
        // y = 1, theta = 2, xbar = 0, tau = 0.5, K = 2, T = 2.
        let spec = scalar_spec(2, 2);
        let theta = [2.0];
        let loss = scalar_loss();
        let xhat = solve_equilibrium(&spec, &theta, &[0.0], 1e-14).unwrap();
        assert!((xhat[0] - 2.0).abs() <= 1e-12);
        let g = g_deq_exact(&spec, &theta, &loss, &xhat).unwrap();
        assert!((g[0] - 2.0).abs() <= 1e-12, "g = {}", g[0]);
        let gj = g_jfb(&spec, &theta, &loss, &xhat);
        assert!((gj[0] - 1.5).abs() <= 1e-12, "gjf = {}", gj[0]);
        let gr = g_retune(&spec, &theta, &loss, &[0.0]);
        assert!((gr[0] - 1.40625).abs() <= 1e-12, "gr = {}", gr[0]);
        let gt = g_trunc(&spec, &theta, &loss, &[0.0]);
        assert!((gt[0] - 1.125).abs() <= 1e-12, "gk = {}", gt[0]);
        let gn = g_neumann(&spec, &theta, &loss, &xhat, 1);
        assert!((gn[0] - 1.875).abs() <= 1e-12, "gn = {}", gn[0]);
    }

    #[test]
    fn neumann_order_zero_is_jfb_bitwise() {
        let spec = scalar_spec(3, 1);
        let theta = [1.7];
        let loss = scalar_loss();
        let xhat = solve_equilibrium(&spec, &theta, &[0.0], 1e-14).unwrap();
        assert_eq!(
            g_neumann(&spec, &theta, &loss, &xhat, 0),
            g_jfb(&spec, &theta, &loss, &xhat)
        );
    }

    #[test]
    fn neumann_converges_geometrically_to_deq() {
        let spec = scalar_spec(2, 1);
        let theta = [2.0];
        let loss = scalar_loss();
        let xhat = solve_equilibrium(&spec, &theta, &[0.0], 1e-14).unwrap();
        let g = g_deq_exact(&spec, &theta, &loss, &xhat).unwrap();
        let cert = spec.certificate(&theta).unwrap();
        let grad_norm = loss.grad_state(&xhat, &theta)[0].abs();
        let traj = unroll_k(&spec.step, &xhat, &theta, spec.k);
        let sens = theta_sensitivity_norm(&spec.step, &traj, &theta, 50, 1e-9, 3);
        for p in 0..12 {
            let gp = g_neumann(&spec, &theta, &loss, &xhat, p);
            let err = (gp[0] - g[0]).abs();
            let bound = cert.delta_k.powi(p as i32 + 1) / (1.0 - cert.delta_k)
                * grad_norm
                * sens;
            assert!(err <= bound + 1e-12, "P={p}: {err} vs {bound}");
        }
    }

    #[test]
    fn retune_at_solution_with_t1_equals_jfb() {
        let spec = scalar_spec(2, 1);
        let theta = [2.0];
        let loss = scalar_loss();
        let xhat = solve_equilibrium(&spec, &theta, &[0.0], 1e-14).unwrap();
        let gr = g_retune(&spec, &theta, &loss, &xhat);
        let gj = g_jfb(&spec, &theta, &loss, &xhat);
        assert!((gr[0] - gj[0]).abs() <= 1e-12);
    }

    #[test]
    fn zero_residual_kills_every_estimator() {
        let spec = scalar_spec(2, 2);
        let theta = [2.0];
        let loss = SquaredError { target: vec![2.0] };
        let xhat = solve_equilibrium(&spec, &theta, &[2.0], 1e-14).unwrap();
        assert!(g_deq_exact(&spec, &theta, &loss, &xhat).unwrap()[0].abs() <= 1e-12);
        assert!(g_jfb(&spec, &theta, &loss, &xhat)[0].abs() <= 1e-12);
        assert!(g_retune(&spec, &theta, &loss, &[2.0])[0].abs() <= 1e-12);
    }

    #[test]
    fn estimators_coincide_when_block_contraction_vanishes() {
        // (1 - tau)^K below machine precision: the block forgets its input.
        let spec = scalar_spec(60, 1);
        let theta = [2.0];
        let loss = scalar_loss();
        let xhat = solve_equilibrium(&spec, &theta, &[0.0], 1e-14).unwrap();
        let g = g_deq_exact(&spec, &theta, &loss, &xhat).unwrap();
        let gj = g_jfb(&spec, &theta, &loss, &xhat);
        let gt = g_trunc(&spec, &theta, &loss, &[0.0]);
        let gr = g_retune(&spec, &theta, &loss, &[0.0]);
        assert!((g[0] - gj[0]).abs() <= 1e-10);
        assert!((g[0] - gt[0]).abs() <= 1e-10);
        assert!((g[0] - gr[0]).abs() <= 1e-10);
    }

    #[test]
    fn deq_matches_finite_differences_of_the_solved_objective() {
        let spec = scalar_spec(2, 1);
        let theta = [2.0];
        let loss = scalar_loss();
        let xhat = solve_equilibrium(&spec, &theta, &[0.0], 1e-14).unwrap();
        let g = g_deq_exact(&spec, &theta, &loss, &xhat).unwrap();
        let f = |t: &[f64]| {
            let x = solve_equilibrium(&spec, t, &[0.0], 1e-13).unwrap();
            loss.value(&x, t)
        };
        let fd = fd_gradient(f, &theta, 1e-6);
        assert!(relative_error(&g, &fd) <= 1e-4);
    }

    #[test]
    fn trunc_limit_reaches_deq_in_one_dimension() {
        let theta = [2.0];
        let loss = scalar_loss();
        let spec = scalar_spec(64, 1);
        let gt = g_trunc(&spec, &theta, &loss, &[0.0]);
        assert!((gt[0] - 2.0).abs() <= 1e-10);
    }

    #[test]
    fn sensitivity_norm_power_iteration_matches_dense_build() {
        use crate::diff::dense_theta_jacobian;
        use crate::linalg::spectral_norm;
        let q = crate::models::QuadraticStep::random_spd(6, 0.5, 2.0, 31);
        let theta = [0.4];
        let traj = unroll_k(&q, &[0.3, -0.2, 0.7, 0.1, -0.5, 0.9], &theta, 4);
        let dense = spectral_norm(&dense_theta_jacobian(&q, &traj, &theta));
        let power = theta_sensitivity_norm(&q, &traj, &theta, 50, 1e-9, 7);
        assert!((dense - power).abs() <= 1e-6 * dense.max(1.0), "{dense} vs {power}");
    }

    #[test]
    fn quadratic_retune_error_decays_at_certified_rate() {
        use crate::bounds_lab::rate_fit;
        let q = crate::models::QuadraticStep::random_spd(5, 0.6, 1.8, 13);
        let theta = [0.7];
        let spec = SchemeSpec::new(q, 2, 1);
        let cert = spec.certificate(&theta).unwrap();
        let loss = SquaredError { target: vec![0.3; 5] };
        let x0 = vec![0.0; 5];
        let xhat = solve_equilibrium(&spec, &theta, &x0, 1e-14).unwrap();
        let gj = g_jfb(&spec, &theta, &loss, &xhat);
        // Late window: the slowest contraction mode must dominate the fit.
        let ts: Vec<usize> = (8..=18).collect();
        let errs: Vec<f64> = ts
            .iter()
            .map(|&t| {
                let sub = SchemeSpec { step: &spec.step, k: spec.k, t };
                let gr = g_retune(&sub, &theta, &loss, &x0);
                gr.iter().zip(&gj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            })
            .collect();
        let xs: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let (slope, _) = rate_fit(&errs, &xs).unwrap();
        let target = cert.delta_k.ln();
        assert!(
            (slope - target).abs() / target.abs() <= 0.1,
            "slope {slope} vs log delta_K {target}"
        );
        // And the decay is dominated by C delta_K^T for the fitted constant.
        let c0 = errs[0] / cert.delta_k.powi(ts[0] as i32);
        for (t, e) in ts.iter().zip(&errs) {
            assert!(*e <= 1.05 * c0 * cert.delta_k.powi(*t as i32));
        }
    }

    #[test]
    fn report_carries_documented_scalar_row() {
        let spec = scalar_spec(2, 2);
        let report =
            compare_estimators(&spec, &[2.0], &scalar_loss(), &[0.0], 1, 1e-13).unwrap();
        assert_eq!(report.reference, ReferenceKind::DeqExact);
        let deq = report.g_deq.as_ref().unwrap();
        assert!((deq.theta_space[0] - 2.0).abs() <= 1e-10);
        assert!((report.g_jfb.theta_space[0] - 1.5).abs() <= 1e-10);
        assert!((report.g_retune.theta_space[0] - 1.40625).abs() <= 1e-10);
        assert!((report.g_neumann.theta_space[0] - 1.875).abs() <= 1e-10);
        assert!((report.err_jfb - 0.5).abs() <= 1e-10);
        // Log-space carries the exp chain factor theta = 2.
        assert!((deq.log_space[0] - 4.0).abs() <= 1e-10);
    }
}
