//! Closed-form reference models: a one-dimensional gradient step whose
//! block, fixed point and sensitivities are all analytic, and a quadratic
//! problem with a learnable stepsize. Both drive oracle tests and the
//! side-by-side estimator comparison.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scheme::{ContractionInfo, ElementaryStep};

/// Gradient step on f(x) = (x - theta y)^2 / 2:
/// phi(x, theta) = (1 - tau) x + tau theta y.
#[derive(Debug, Clone, Copy)]
pub struct ScalarStep {
    pub y: f64,
    pub tau: f64,
}

impl ScalarStep {
    /// Closed-form block: Phi_K(x) = (1-tau)^K x + (1-(1-tau)^K) theta y.
    pub fn block_closed_form(&self, x0: f64, theta: f64, k: usize) -> f64 {
        let a = (1.0 - self.tau).powi(k as i32);
        a * x0 + (1.0 - a) * theta * self.y
    }

    /// d Phi_K / d theta = (1 - (1-tau)^K) y, independent of x.
    pub fn block_theta_sensitivity(&self, k: usize) -> f64 {
        (1.0 - (1.0 - self.tau).powi(k as i32)) * self.y
    }

    pub fn fixed_point(&self, theta: f64) -> f64 {
        theta * self.y
    }
}

impl ElementaryStep for ScalarStep {
    fn state_dim(&self) -> usize {
        1
    }

    fn theta_dim(&self) -> usize {
        1
    }

    fn apply(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
        vec![(1.0 - self.tau) * x[0] + self.tau * theta[0] * self.y]
    }

    fn vjp(&self, _x: &[f64], _theta: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (vec![(1.0 - self.tau) * v[0]], vec![self.tau * self.y * v[0]])
    }

    fn jvp(&self, _x: &[f64], _theta: &[f64], tx: &[f64], t_theta: &[f64]) -> Vec<f64> {
        vec![(1.0 - self.tau) * tx[0] + self.tau * self.y * t_theta[0]]
    }

    fn contraction(&self, _theta: &[f64]) -> Option<ContractionInfo> {
        (self.tau > 0.0 && self.tau < 2.0).then(|| ContractionInfo {
            mu: 1.0,
            l: 1.0,
            omega: (1.0 - self.tau).abs(),
        })
    }
}

/// Gradient step on f(x) = x^T H x / 2 - b^T x with the stepsize as the
/// learned parameter: phi(x, theta) = x - theta (H x - b). The fixed point
/// H^-1 b does not depend on theta, so the exact hypergradient of any loss
/// of the equilibrium vanishes.
#[derive(Debug, Clone)]
pub struct QuadraticStep {
    pub hess: DMatrix<f64>,
    pub rhs: DVector<f64>,
    eig_min: f64,
    eig_max: f64,
}

impl QuadraticStep {
    pub fn new(hess: DMatrix<f64>, rhs: DVector<f64>) -> Self {
        let eigs = hess.clone().symmetric_eigen().eigenvalues;
        let eig_min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        let eig_max = eigs.iter().cloned().fold(0.0, f64::max);
        Self { hess, rhs, eig_min, eig_max }
    }

    /// Random symmetric positive-definite instance with eigenvalues in
    /// [mu, l], built from a seeded orthogonal basis.
    pub fn random_spd(n: usize, mu: f64, l: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let q = raw.qr().q();
        let mut d = DMatrix::zeros(n, n);
        for i in 0..n {
            let lam = if n == 1 {
                0.5 * (mu + l)
            } else {
                mu + (l - mu) * i as f64 / (n - 1) as f64
            };
            d[(i, i)] = lam;
        }
        let hess = &q * d * q.transpose();
        let rhs = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        Self::new(hess, rhs)
    }

    pub fn residual(&self, x: &[f64]) -> DVector<f64> {
        &self.hess * DVector::from_column_slice(x) - &self.rhs
    }

    pub fn solution(&self) -> DVector<f64> {
        self.hess
            .clone()
            .lu()
            .solve(&self.rhs)
            .expect("positive-definite Hessian is invertible")
    }

    pub fn spectral_bounds(&self) -> (f64, f64) {
        (self.eig_min, self.eig_max)
    }

    /// Exact mixed-derivative norm ||d_x d_theta Phi_K||_2
    /// = K max_i |lam_i (1 - theta lam_i)^{K-1}| from commuting powers.
    pub fn mixed_derivative_norm(&self, theta: f64, k: usize) -> f64 {
        let eigs = self.hess.clone().symmetric_eigen().eigenvalues;
        eigs.iter()
            .map(|&lam| (k as f64) * (lam * (1.0 - theta * lam).powi(k as i32 - 1)).abs())
            .fold(0.0, f64::max)
    }
}

impl ElementaryStep for QuadraticStep {
    fn state_dim(&self) -> usize {
        self.rhs.len()
    }

    fn theta_dim(&self) -> usize {
        1
    }

    fn apply(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
        let r = self.residual(x);
        x.iter().zip(r.iter()).map(|(xi, ri)| xi - theta[0] * ri).collect()
    }

    fn vjp(&self, x: &[f64], theta: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let vv = DVector::from_column_slice(v);
        let hv = &self.hess * &vv;
        let wrt_x: Vec<f64> = v.iter().zip(hv.iter()).map(|(vi, hi)| vi - theta[0] * hi).collect();
        let r = self.residual(x);
        let wrt_theta = vec![-r.dot(&vv)];
        (wrt_x, wrt_theta)
    }

    fn jvp(&self, x: &[f64], theta: &[f64], tx: &[f64], t_theta: &[f64]) -> Vec<f64> {
        let tv = DVector::from_column_slice(tx);
        let htv = &self.hess * &tv;
        let r = self.residual(x);
        (0..x.len())
            .map(|i| tx[i] - theta[0] * htv[i] - t_theta[0] * r[i])
            .collect()
    }

    fn contraction(&self, theta: &[f64]) -> Option<ContractionInfo> {
        let tau = theta[0];
        (tau > 0.0 && tau < 2.0 / self.eig_max).then(|| ContractionInfo {
            mu: self.eig_min,
            l: self.eig_max,
            omega: (1.0 - tau * self.eig_min).abs().max((1.0 - tau * self.eig_max).abs()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheme::{apply_block, fixed_point_solve, unroll_k, SchemeSpec};

    #[test]
    fn scalar_fixed_point_and_block() {
        let step = ScalarStep { y: 1.0, tau: 0.5 };
        assert_eq!(step.fixed_point(2.0), 2.0);
        assert!((step.block_closed_form(0.0, 2.0, 2) - 1.5).abs() <= 1e-15);
        assert!((step.block_theta_sensitivity(2) - 0.75).abs() <= 1e-15);
        let states = unroll_k(&step, &[0.0], &[2.0], 2);
        assert!((states[2][0] - 1.5).abs() <= 1e-15);
    }

    #[test]
    fn quadratic_solution_is_stepsize_independent() {
        let q = QuadraticStep::random_spd(6, 0.5, 2.0, 3);
        let spec1 = SchemeSpec::new(q.clone(), 4, 1);
        let x1 = fixed_point_solve(&spec1, &[0.3], &vec![0.0; 6], 1e-12).unwrap();
        let x2 = fixed_point_solve(&spec1, &[0.8], &vec![0.0; 6], 1e-12).unwrap();
        let exact = q.solution();
        for i in 0..6 {
            assert!((x1[i] - exact[i]).abs() <= 1e-8);
            assert!((x2[i] - exact[i]).abs() <= 1e-8);
        }
    }

    #[test]
    fn quadratic_block_matches_matrix_power() {
        // Phi_K affine with linear part (I - tau H)^K.
        let q = QuadraticStep::random_spd(4, 0.5, 2.0, 9);
        let theta = [0.6];
        let k = 3;
        let n = 4;
        let mut lin = DMatrix::identity(n, n);
        let step_mat = DMatrix::identity(n, n) - theta[0] * &q.hess;
        for _ in 0..k {
            lin = &step_mat * lin;
        }
        // Columns of the linear part from applying the block to basis
        // vectors minus the block at zero.
        let at_zero = apply_block(&q, &vec![0.0; n], &theta, k);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = apply_block(&q, &e, &theta, k);
            for i in 0..n {
                assert!((col[i] - at_zero[i] - lin[(i, j)]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn quadratic_certificate_matches_eigenvalues() {
        let q = QuadraticStep::random_spd(5, 0.25, 1.75, 21);
        let c = q.contraction(&[0.9]).unwrap();
        assert!((c.mu - 0.25).abs() <= 1e-9);
        assert!((c.l - 1.75).abs() <= 1e-9);
        assert!(q.contraction(&[2.0]).is_none());
    }
}
