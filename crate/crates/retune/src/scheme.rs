//! Elementary fixed-point steps, the K-step unrolled block, T-times
//! restarts, Lipschitz certificates, and a Banach-Picard reference solver.
//!
//! Everything downstream (differentiation, hypergradient estimators, bound
//! certification, training) is generic over [`ElementaryStep`], so the same
//! machinery runs the scalar and quadratic reference models, the wavelet
//! forward-backward step, and the plug-and-play step.

use std::sync::Arc;

use crate::core::PriorKind;
use crate::error::{Error, Result};
use crate::group_norms::{group_l21_norm, prox_group_l21_slice, prox_vjp_slice, GroupStructure};
use crate::wavelet::ThetaMap;

/// One elementary update x -> phi(x, theta) with analytic derivative actions.
///
/// `theta` is the effective (positive) parameter vector; gradients returned
/// by `vjp` live in the same space. The log-space chain factor is applied by
/// callers that train in log coordinates.
pub trait ElementaryStep: Sync {
    fn state_dim(&self) -> usize;
    fn theta_dim(&self) -> usize;
    fn apply(&self, x: &[f64], theta: &[f64]) -> Vec<f64>;
    /// Returns (v^T d_x phi, v^T d_theta phi).
    fn vjp(&self, x: &[f64], theta: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>);
    /// Forward tangent d_x phi . tx + d_theta phi . t_theta.
    fn jvp(&self, x: &[f64], theta: &[f64], tx: &[f64], t_theta: &[f64]) -> Vec<f64>;
    /// Per-step Lipschitz certificate, when one is available.
    fn contraction(&self, theta: &[f64]) -> Option<ContractionInfo>;
}

impl<S: ElementaryStep + ?Sized> ElementaryStep for &S {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn theta_dim(&self) -> usize {
        (**self).theta_dim()
    }
    fn apply(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
        (**self).apply(x, theta)
    }
    fn vjp(&self, x: &[f64], theta: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (**self).vjp(x, theta, v)
    }
    fn jvp(&self, x: &[f64], theta: &[f64], tx: &[f64], t_theta: &[f64]) -> Vec<f64> {
        (**self).jvp(x, theta, tx, t_theta)
    }
    fn contraction(&self, theta: &[f64]) -> Option<ContractionInfo> {
        (**self).contraction(theta)
    }
}

/// Strong-convexity/smoothness pair and the per-step factor they induce.
#[derive(Debug, Clone, Copy)]
pub struct ContractionInfo {
    pub mu: f64,
    pub l: f64,
    pub omega: f64,
}

/// Contraction certificate for the K-step block.
#[derive(Debug, Clone, Copy)]
pub struct LipschitzCert {
    pub mu: f64,
    pub l: f64,
    pub omega: f64,
    pub delta_k: f64,
}

/// An elementary step together with its block depth K and restart count T.
#[derive(Debug, Clone)]
pub struct SchemeSpec<S> {
    pub step: S,
    pub k: usize,
    pub t: usize,
}

impl<S: ElementaryStep> SchemeSpec<S> {
    pub fn new(step: S, k: usize, t: usize) -> Self {
        assert!(k >= 1 && t >= 1);
        Self { step, k, t }
    }

    /// delta_K = omega^K from the per-step certificate.
    pub fn certificate(&self, theta: &[f64]) -> Option<LipschitzCert> {
        self.step.contraction(theta).map(|c| LipschitzCert {
            mu: c.mu,
            l: c.l,
            omega: c.omega,
            delta_k: c.omega.powi(self.k as i32),
        })
    }
}

/// omega(tau) = max(|1 - tau mu|, |1 - tau L|) for a gradient step on a
/// mu-strongly convex, L-smooth function; in (0, 1) whenever mu > 0 and
/// 0 < tau < 2/L.
pub fn lipschitz_omega(tau: f64, mu: f64, l: f64) -> Result<f64> {
    if tau <= 0.0 || tau >= 2.0 / l {
        return Err(Error::StepsizeOutOfRange { tau, max: 2.0 / l });
    }
    Ok((1.0 - tau * mu).abs().max((1.0 - tau * l).abs()))
}

/// The optimal stepsize 2/(mu + L) for given spectral bounds.
pub fn optimal_tau(mu: f64, l: f64) -> f64 {
    2.0 / (mu + l)
}

/// Spectral bounds of the wavelet inner problem's Hessian theta^-2:
/// mu = 1/max(diag)^2 and L = 1/min(diag)^2, the approximation band's unit
/// weight included.
pub fn wavelet_gram_bounds(diag: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for &d in diag {
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (1.0 / (hi * hi), 1.0 / (lo * lo))
}

/// tau* = 2 / (1/max(diag)^2 + 1/min(diag)^2) for the wavelet problem.
pub fn default_tau(diag: &[f64]) -> f64 {
    let (mu, l) = wavelet_gram_bounds(diag);
    optimal_tau(mu, l)
}

/// The alternative aggressive rule tau = 1.95/L with L = 1/min(diag)^2.
pub fn aggressive_tau(diag: &[f64]) -> f64 {
    let (_, l) = wavelet_gram_bounds(diag);
    1.95 / l
}

/// Run K elementary steps and keep the whole trajectory
/// [x_0, x_1, ..., x_K] for reverse-mode passes.
pub fn unroll_k<S: ElementaryStep>(
    step: &S,
    x0: &[f64],
    theta: &[f64],
    k: usize,
) -> Vec<Vec<f64>> {
    let mut states = Vec::with_capacity(k + 1);
    states.push(x0.to_vec());
    for _ in 0..k {
        let next = step.apply(states.last().unwrap(), theta);
        states.push(next);
    }
    states
}

/// Apply the K-step block once, discarding intermediate states.
pub fn apply_block<S: ElementaryStep>(step: &S, x0: &[f64], theta: &[f64], k: usize) -> Vec<f64> {
    let mut x = x0.to_vec();
    for _ in 0..k {
        x = step.apply(&x, theta);
    }
    x
}

/// T successive applications of the K-step block, returning every restart
/// state [x_0, x_K, x_2K, ..., x_KT].
pub fn restart_states<S: ElementaryStep>(
    spec: &SchemeSpec<S>,
    x0: &[f64],
    theta: &[f64],
) -> Vec<Vec<f64>> {
    let mut states = Vec::with_capacity(spec.t + 1);
    states.push(x0.to_vec());
    for _ in 0..spec.t {
        let next = apply_block(&spec.step, states.last().unwrap(), theta, spec.k);
        states.push(next);
    }
    states
}

/// The last two restart states (x_{K(T-1)}, x_{KT}) consumed by the
/// restarted gradient step.
pub fn restart_t<S: ElementaryStep>(
    spec: &SchemeSpec<S>,
    x0: &[f64],
    theta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut prev = x0.to_vec();
    let mut cur = apply_block(&spec.step, &prev, theta, spec.k);
    for _ in 1..spec.t {
        let next = apply_block(&spec.step, &cur, theta, spec.k);
        prev = cur;
        cur = next;
    }
    (prev, cur)
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Iterate the K-step block to the fixed point. With a contraction
/// certificate the stop rule is the a-posteriori Banach bound
/// ||x_{t+1} - x_t|| <= tol (1 - delta_K)/delta_K, which guarantees
/// ||x_{t+1} - x_hat|| <= tol. Without a certificate the raw residual is
/// used and the result is monitored, not certified.
pub fn fixed_point_solve<S: ElementaryStep>(
    spec: &SchemeSpec<S>,
    theta: &[f64],
    x0: &[f64],
    tol: f64,
) -> Result<Vec<f64>> {
    const STEP_CAP: usize = 1_000_000;
    let threshold = match spec.certificate(theta) {
        Some(cert) if cert.delta_k < 1.0 => tol * (1.0 - cert.delta_k) / cert.delta_k,
        _ => tol,
    };
    let mut x = x0.to_vec();
    let mut steps = 0usize;
    loop {
        let next = apply_block(&spec.step, &x, theta, spec.k);
        steps += spec.k;
        let moved = norm_diff(&next, &x);
        x = next;
        if moved <= threshold {
            return Ok(x);
        }
        if steps >= STEP_CAP {
            return Err(Error::NotContractive { cap: STEP_CAP });
        }
    }
}

/// Empirical Lipschitz quotient of the K-step block over sampled pairs;
/// used where no analytic certificate exists.
pub fn sampled_block_quotient<S: ElementaryStep>(
    spec: &SchemeSpec<S>,
    theta: &[f64],
    pairs: &[(Vec<f64>, Vec<f64>)],
) -> f64 {
    let mut worst = 0.0f64;
    for (a, b) in pairs {
        let fa = apply_block(&spec.step, a, theta, spec.k);
        let fb = apply_block(&spec.step, b, theta, spec.k);
        let den = norm_diff(a, b);
        if den > 0.0 {
            worst = worst.max(norm_diff(&fa, &fb) / den);
        }
    }
    worst
}

/// Forward-backward step on wavelet coefficients for the reformulated
/// denoising problem: prox_{tau ||.||_{2,1}}(u - tau (theta^-2 u - theta^-1 D y)).
///
/// `theta` is the flat prior vector [lambda_1..lambda_J, Lambda...]; the
/// diagonal weight map (unit weight on the approximation band) turns it into
/// per-coefficient factors. The stepsize is frozen data of the step: the
/// trainer re-derives it between outer iterations rather than
/// differentiating through it.
#[derive(Debug, Clone)]
pub struct FbStep {
    pub map: Arc<ThetaMap>,
    pub groups: Arc<GroupStructure>,
    /// Transformed observation D y.
    pub dy: Vec<f64>,
    pub tau: f64,
}

impl FbStep {
    pub fn new(
        map: Arc<ThetaMap>,
        groups: Arc<GroupStructure>,
        dy: Vec<f64>,
        tau: f64,
    ) -> Result<Self> {
        if dy.len() != map.layout.total_len() {
            return Err(Error::ShapeMismatch("observation does not match layout".into()));
        }
        if tau <= 0.0 {
            return Err(Error::StepsizeOutOfRange { tau, max: f64::INFINITY });
        }
        Ok(Self { map, groups, dy, tau })
    }

    /// Check tau against the smoothness bound at the given parameters.
    pub fn validate_stepsize(&self, theta: &[f64]) -> Result<()> {
        let (_, l) = wavelet_gram_bounds(&self.map.diag(theta));
        if self.tau >= 2.0 / l {
            return Err(Error::StepsizeOutOfRange { tau: self.tau, max: 2.0 / l });
        }
        Ok(())
    }

    fn gradient_point(&self, x: &[f64], diag: &[f64]) -> Vec<f64> {
        let tau = self.tau;
        x.iter()
            .zip(diag)
            .zip(&self.dy)
            .map(|((&u, &d), &dy)| u - tau * (u / (d * d) - dy / d))
            .collect()
    }

    /// Objective of the reformulated problem,
    /// (1/2)||theta^-1 u - D y||^2 + ||u||_{2,1}; orthonormality folds the
    /// synthesis away.
    pub fn energy(&self, x: &[f64], theta: &[f64]) -> f64 {
        let diag = self.map.diag(theta);
        let quad: f64 = x
            .iter()
            .zip(&diag)
            .zip(&self.dy)
            .map(|((&u, &d), &dy)| (u / d - dy) * (u / d - dy))
            .sum();
        0.5 * quad + group_l21_norm(x, &self.groups)
    }
}

impl ElementaryStep for FbStep {
    fn state_dim(&self) -> usize {
        self.map.layout.total_len()
    }

    fn theta_dim(&self) -> usize {
        self.map.theta_dim()
    }

    fn apply(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
        let diag = self.map.diag(theta);
        let z = self.gradient_point(x, &diag);
        prox_group_l21_slice(&z, self.tau, &self.groups)
    }

    fn vjp(&self, x: &[f64], theta: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let diag = self.map.diag(theta);
        let z = self.gradient_point(x, &diag);
        // The prox Jacobian is symmetric, so pulling v back through it is
        // the same group-wise action as pushing forward.
        let a = prox_vjp_slice(&z, self.tau, v, &self.groups);
        let tau = self.tau;
        let mut wrt_x = vec![0.0; x.len()];
        let mut grad_diag = vec![0.0; x.len()];
        for i in 0..x.len() {
            let d = diag[i];
            wrt_x[i] = a[i] * (1.0 - tau / (d * d));
            grad_diag[i] = a[i] * tau * (2.0 * x[i] / (d * d * d) - self.dy[i] / (d * d));
        }
        (wrt_x, self.map.pullback(&grad_diag, theta))
    }

    fn jvp(&self, x: &[f64], theta: &[f64], tx: &[f64], t_theta: &[f64]) -> Vec<f64> {
        let diag = self.map.diag(theta);
        let z = self.gradient_point(x, &diag);
        let t_diag = self.map.pushforward(t_theta, theta);
        let tau = self.tau;
        let mut tz = vec![0.0; x.len()];
        for i in 0..x.len() {
            let d = diag[i];
            tz[i] = tx[i] * (1.0 - tau / (d * d))
                + t_diag[i] * tau * (2.0 * x[i] / (d * d * d) - self.dy[i] / (d * d));
        }
        prox_vjp_slice(&z, self.tau, &tz, &self.groups)
    }

    fn contraction(&self, theta: &[f64]) -> Option<ContractionInfo> {
        let (mu, l) = wavelet_gram_bounds(&self.map.diag(theta));
        lipschitz_omega(self.tau, mu, l)
            .ok()
            .map(|omega| ContractionInfo { mu, l, omega })
    }
}

/// Convenience: build the (ThetaMap, GroupStructure) pair for a layout.
pub fn prior_structures(
    layout: Arc<crate::wavelet::CoeffLayout>,
    kind: PriorKind,
) -> (Arc<ThetaMap>, Arc<GroupStructure>) {
    let groups = Arc::new(GroupStructure::new(&layout, kind));
    let map = Arc::new(ThetaMap::new(layout, kind));
    (map, groups)
}
