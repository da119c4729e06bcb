//! Shared numeric containers: signals with shape metadata, hyperparameter
//! vectors in log-parameterization, datasets, the squared-error loss and its
//! gradient, and PSNR.

use crate::error::{Error, Result};

/// (height, width, channels) metadata for a flat signal buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A flat real array with image shape metadata. Layout is channel-major:
/// all of channel 0 in row-major order, then channel 1, and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub data: Vec<f64>,
    pub shape: Shape,
}

impl Signal {
    pub fn new(data: Vec<f64>, shape: Shape) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "buffer length {} does not match shape {}x{}x{}",
                data.len(),
                shape.height,
                shape.width,
                shape.channels
            )));
        }
        Ok(Self { data, shape })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { data: vec![0.0; shape.len()], shape }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Index of pixel (row, col) in channel c.
    pub fn idx(&self, row: usize, col: usize, c: usize) -> usize {
        (c * self.shape.height + row) * self.shape.width + col
    }
}

/// Which parametric prior the weight vector Lambda refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    /// One weight per (band, channel) pair; groups couple bands and channels.
    BandsChannels,
    /// One weight per band; groups couple bands only.
    Bands,
}

/// Log-parameterized positive hyperparameters. Effective values are
/// exponentials of the stored fields, so positivity holds by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// One log-weight per scale j = 1..=J.
    pub log_lambda: Vec<f64>,
    /// One log-weight per band (3 entries) or per band-channel pair (3*C).
    pub log_cap: Vec<f64>,
    pub log_tau: f64,
    pub log_sigma: f64,
    pub prior_kind: PriorKind,
}

impl HyperParams {
    /// Uniform initialization: lambda_j = lambda0, Lambda = 1, tau = sigma = 1.
    pub fn uniform(levels: usize, channels: usize, prior_kind: PriorKind, lambda0: f64) -> Self {
        let caps = match prior_kind {
            PriorKind::BandsChannels => 3 * channels,
            PriorKind::Bands => 3,
        };
        Self {
            log_lambda: vec![lambda0.ln(); levels],
            log_cap: vec![0.0; caps],
            log_tau: 0.0,
            log_sigma: 0.0,
            prior_kind,
        }
    }

    pub fn levels(&self) -> usize {
        self.log_lambda.len()
    }

    /// Effective scale weights lambda_j = exp(log_lambda_j).
    pub fn lambda(&self) -> Vec<f64> {
        self.log_lambda.iter().map(|v| v.exp()).collect()
    }

    /// Effective band(-channel) weights Lambda = exp(log_cap).
    pub fn cap(&self) -> Vec<f64> {
        self.log_cap.iter().map(|v| v.exp()).collect()
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    /// Flat effective parameter vector for the wavelet prior: [lambda..., Lambda...].
    pub fn prior_theta(&self) -> Vec<f64> {
        let mut v = self.lambda();
        v.extend(self.cap());
        v
    }

    /// Overwrite the prior parameters from a flat log-space vector.
    pub fn set_prior_log(&mut self, log_theta: &[f64]) {
        let j = self.log_lambda.len();
        self.log_lambda.copy_from_slice(&log_theta[..j]);
        self.log_cap.copy_from_slice(&log_theta[j..]);
    }

    /// Flat log-space vector matching `prior_theta`.
    pub fn prior_log(&self) -> Vec<f64> {
        let mut v = self.log_lambda.clone();
        v.extend(self.log_cap.iter().copied());
        v
    }
}

/// Supervised pairs of clean and observed signals plus the seed that made them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<(Signal, Signal)>,
    pub seed: u64,
}

impl Dataset {
    pub fn new(pairs: Vec<(Signal, Signal)>, seed: u64) -> Result<Self> {
        if let Some(first) = pairs.first() {
            let shape = first.0.shape;
            for (clean, observed) in &pairs {
                if clean.shape != shape || observed.shape != shape {
                    return Err(Error::ShapeMismatch(
                        "all dataset pairs must share one shape".into(),
                    ));
                }
            }
        }
        Ok(Self { pairs, seed })
    }

    pub fn shape(&self) -> Option<Shape> {
        self.pairs.first().map(|p| p.0.shape)
    }
}

fn check_shapes(x: &Signal, reference: &Signal) -> Result<()> {
    if x.shape != reference.shape {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            x.shape.height,
            x.shape.width,
            x.shape.channels,
            reference.shape.height,
            reference.shape.width,
            reference.shape.channels
        )));
    }
    Ok(())
}

/// Squared-error loss (1/2)||x - ref||^2, summed in a fixed sequential order.
///
/// The 1/2 factor makes the gradient exactly `x - ref`.
pub fn mse_loss(x: &Signal, reference: &Signal) -> Result<f64> {
    check_shapes(x, reference)?;
    Ok(half_sq_norm_diff(&x.data, &reference.data))
}

/// (1/2)||a - b||^2 on raw buffers.
pub fn half_sq_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (xa, xb) in a.iter().zip(b) {
        let d = xa - xb;
        acc += d * d;
    }
    0.5 * acc
}

/// Gradient of `mse_loss` in x: the residual x - ref.
pub fn loss_gradient(x: &Signal, reference: &Signal) -> Result<Signal> {
    check_shapes(x, reference)?;
    let data = x.data.iter().zip(&reference.data).map(|(a, b)| a - b).collect();
    Ok(Signal { data, shape: x.shape })
}

/// Peak signal-to-noise ratio in dB: 10 log10(peak^2 n / ||x - ref||^2).
pub fn psnr(x: &Signal, reference: &Signal, peak: f64) -> Result<f64> {
    check_shapes(x, reference)?;
    let err: f64 = x
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if err == 0.0 {
        return Err(Error::InfinitePsnr);
    }
    let n = x.len() as f64;
    Ok(10.0 * (peak * peak * n / err).log10())
}

/// Diagonal chain factor d(theta)/d(log theta) = theta for the positivity
/// reparameterization: a gradient in log-space is the effective-space gradient
/// scaled elementwise by these factors.
pub fn reparam_chain_factor(p: &HyperParams) -> Vec<f64> {
    let mut v = p.prior_theta();
    v.push(p.tau());
    v.push(p.sigma());
    v
}

/// Elementwise map of an effective-space gradient to log-space.
pub fn grad_to_log_space(grad_theta: &[f64], theta: &[f64]) -> Vec<f64> {
    grad_theta.iter().zip(theta).map(|(g, t)| g * t).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(data: Vec<f64>) -> Signal {
        let n = data.len();
        Signal::new(data, Shape::new(1, n, 1)).unwrap()
    }

    #[test]
    fn mse_identity_is_zero() {
        let x = sig(vec![0.3, -1.2, 4.0]);
        assert_eq!(mse_loss(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn mse_closed_form() {
        let x = sig(vec![1.0, 0.0]);
        let r = sig(vec![0.0, 0.0]);
        assert_eq!(mse_loss(&x, &r).unwrap(), 0.5);
    }

    #[test]
    fn mse_matches_elementwise_sum_oracle() {
        // Direct summation oracle on a fixed pseudo-random pair of length 16.
        let x: Vec<f64> = (0..16).map(|i| ((i * 37 + 11) % 23) as f64 / 7.0 - 1.5).collect();
        let r: Vec<f64> = (0..16).map(|i| ((i * 53 + 5) % 19) as f64 / 5.0 - 1.0).collect();
        let mut oracle = 0.0;
        for i in 0..16 {
            oracle += (x[i] - r[i]) * (x[i] - r[i]);
        }
        oracle *= 0.5;
        let got = mse_loss(&sig(x), &sig(r)).unwrap();
        assert!((got - oracle).abs() <= 1e-12);
    }

    #[test]
    fn gradient_closed_forms() {
        let x = sig(vec![3.0, 1.0]);
        let r = sig(vec![1.0, 1.0]);
        let g = loss_gradient(&x, &r).unwrap();
        assert_eq!(g.data, vec![2.0, 0.0]);
        let gz = loss_gradient(&r, &r).unwrap();
        assert!(gz.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let r: Vec<f64> = (0..16).map(|i| (i as f64 * 0.61).cos()).collect();
        let xs = sig(x.clone());
        let rs = sig(r);
        let g = loss_gradient(&xs, &rs).unwrap();
        let h = 1e-6;
        let mut err_sq = 0.0;
        let mut ref_sq = 0.0;
        for i in 0..16 {
            let mut xp = xs.clone();
            let mut xm = xs.clone();
            xp.data[i] += h;
            xm.data[i] -= h;
            let fd = (mse_loss(&xp, &rs).unwrap() - mse_loss(&xm, &rs).unwrap()) / (2.0 * h);
            err_sq += (g.data[i] - fd).powi(2);
            ref_sq += fd * fd;
        }
        let rel = (err_sq / ref_sq).sqrt();
        assert!(rel <= 1e-8, "rel err {rel}");
    }

    #[test]
    fn mse_shape_mismatch_is_an_error() {
        let x = sig(vec![1.0, 2.0]);
        let r = sig(vec![1.0, 2.0, 3.0]);
        assert!(mse_loss(&x, &r).is_err());
        assert!(loss_gradient(&x, &r).is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        // ||x-ref||^2 / n = 0.01 with peak 1 -> 20 dB.
        let n = 4;
        let x = sig(vec![0.1; n]);
        let r = sig(vec![0.0; n]);
        assert!((psnr(&x, &r, 1.0).unwrap() - 20.0).abs() <= 1e-12);
        // Error energy 1 per pixel -> 0 dB.
        let x1 = sig(vec![1.0; n]);
        assert!((psnr(&x1, &r, 1.0).unwrap() - 0.0).abs() <= 1e-12);
    }

    #[test]
    fn psnr_doubling_error_energy_costs_3dB() {
        let n = 8;
        let r = sig(vec![0.0; n]);
        let x1 = sig(vec![0.2; n]);
        let x2 = sig(vec![0.2 * 2.0f64.sqrt(); n]);
        let drop = psnr(&x1, &r, 1.0).unwrap() - psnr(&x2, &r, 1.0).unwrap();
        assert!((drop - 10.0 * 2.0f64.log10()).abs() <= 1e-10);
    }

    #[test]
    fn psnr_identical_inputs_signal_infinite() {
        let x = sig(vec![0.5, 0.25]);
        assert!(matches!(psnr(&x, &x, 1.0), Err(Error::InfinitePsnr)));
    }

    #[test]
    fn chain_factor_is_exp_of_log_params() {
        let mut p = HyperParams::uniform(2, 1, PriorKind::Bands, 1.0);
        assert_eq!(reparam_chain_factor(&p)[0], 1.0);
        p.log_lambda[0] = 2.0f64.ln();
        assert!((reparam_chain_factor(&p)[0] - 2.0).abs() <= 1e-15);
    }

    #[test]
    fn chain_factor_matches_finite_differences() {
        // d/d(log lam) of lam^2 at lam = 3 is 2 * 3^2 = 18.
        let f = |log_lam: f64| log_lam.exp().powi(2);
        let at = 3.0f64.ln();
        let h = 1e-7;
        let fd = (f(at + h) - f(at - h)) / (2.0 * h);
        // chain rule: d(lam^2)/d(lam) * lam = 2 lam * lam
        let lam: f64 = 3.0;
        let analytic = 2.0 * lam * lam;
        assert!((fd - analytic).abs() / analytic <= 1e-7);
        assert!((analytic - 18.0).abs() <= 1e-12);
    }

    #[test]
    fn positivity_holds_for_any_log_value() {
        for &v in &[-700.0, -10.0, 0.0, 10.0, 300.0] {
            let mut p = HyperParams::uniform(1, 1, PriorKind::Bands, 1.0);
            p.log_lambda[0] = v;
            assert!(p.lambda()[0] > 0.0);
        }
    }

    #[test]
    fn dataset_rejects_mixed_shapes() {
        let a = sig(vec![0.0; 4]);
        let b = Signal::zeros(Shape::new(2, 2, 1));
        assert!(Dataset::new(vec![(a.clone(), a.clone()), (b.clone(), b)], 0).is_err());
    }
}
