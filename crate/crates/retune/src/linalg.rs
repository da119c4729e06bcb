//! Small dense linear-algebra helpers: spectral norms, power iteration on
//! operator pairs, and a least-squares line fit.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest singular value of a dense matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Operator 2-norm of a map R^d -> R^n given by `forward` with adjoint
/// `adjoint`, by power iteration on the d x d Gram operator. Deterministic
/// for a fixed seed; 20 iterations at tolerance 1e-6 by default.
pub fn operator_norm_power<F, G>(
    forward: F,
    adjoint: G,
    dim: usize,
    iters: usize,
    tol: f64,
    seed: u64,
) -> f64
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nv == 0.0 {
        v[0] = 1.0;
        nv = 1.0;
    }
    for x in v.iter_mut() {
        *x /= nv;
    }
    let mut sigma = 0.0f64;
    for _ in 0..iters {
        let w = forward(&v);
        let z = adjoint(&w);
        let rayleigh: f64 = v.iter().zip(&z).map(|(a, b)| a * b).sum();
        let next_sigma = rayleigh.max(0.0).sqrt();
        let nz = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nz == 0.0 {
            return 0.0;
        }
        v = z.iter().map(|x| x / nz).collect();
        if (next_sigma - sigma).abs() <= tol * next_sigma.max(1.0) {
            return next_sigma;
        }
        sigma = next_sigma;
    }
    sigma
}

/// Ordinary least squares of y against x: returns (slope, intercept, r^2).
pub fn line_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}
