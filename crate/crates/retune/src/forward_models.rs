//! Linear forward operators (identity, inpainting mask, channel-wise periodic
//! blur), their adjoints, and exact spectral bounds of A^T A used by the
//! Lipschitz certificates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::core::{Shape, Signal};
use crate::error::{Error, Result};

/// One blur tap: (row offset, column offset, weight).
pub type ConvTap = (isize, isize, f64);

#[derive(Debug, Clone)]
pub enum LinearOp {
    Identity,
    /// Hadamard product with a binary mask (1 keeps a sample, 0 drops it).
    Mask(Vec<f64>),
    /// Per-channel periodic convolution kernels given as tap lists.
    Conv(Vec<Vec<ConvTap>>),
}

impl LinearOp {
    /// Per-pixel Bernoulli(keep_prob) mask replicated across channels.
    pub fn bernoulli_mask(shape: Shape, keep_prob: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plane = shape.height * shape.width;
        let pixel_mask: Vec<f64> = (0..plane)
            .map(|_| if rng.gen::<f64>() < keep_prob { 1.0 } else { 0.0 })
            .collect();
        let mut m = Vec::with_capacity(shape.len());
        for _ in 0..shape.channels {
            m.extend_from_slice(&pixel_mask);
        }
        LinearOp::Mask(m)
    }

    /// Channel-wise anisotropic uniform blur: a normalized line PSF of the
    /// given width, horizontal on channel 0, vertical on channel 1, diagonal
    /// on channel 2 (and cycling for further channels).
    pub fn anisotropic_uniform_blur(channels: usize, width: usize) -> Self {
        let w = width.max(1);
        let half = (w as isize - 1) / 2;
        let weight = 1.0 / w as f64;
        let mut kernels = Vec::with_capacity(channels);
        for c in 0..channels {
            let taps: Vec<ConvTap> = (0..w as isize)
                .map(|i| {
                    let o = i - half;
                    match c % 3 {
                        0 => (0, o, weight),
                        1 => (o, 0, weight),
                        _ => (o, o, weight),
                    }
                })
                .collect();
            kernels.push(taps);
        }
        LinearOp::Conv(kernels)
    }

    /// Dirac kernel on every channel (identity as a Conv operator).
    pub fn dirac(channels: usize) -> Self {
        LinearOp::Conv(vec![vec![(0, 0, 1.0)]; channels])
    }
}

fn check_len(op: &LinearOp, x: &Signal) -> Result<()> {
    if let LinearOp::Mask(m) = op {
        if m.len() != x.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask length {} vs signal length {}",
                m.len(),
                x.len()
            )));
        }
    }
    if let LinearOp::Conv(kernels) = op {
        if kernels.len() != x.shape.channels {
            return Err(Error::ShapeMismatch(format!(
                "{} kernels vs {} channels",
                kernels.len(),
                x.shape.channels
            )));
        }
    }
    Ok(())
}

fn conv_channel(
    x: &[f64],
    h: usize,
    w: usize,
    taps: &[ConvTap],
    out: &mut [f64],
    adjoint: bool,
) {
    let hi = h as isize;
    let wi = w as isize;
    out.fill(0.0);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for &(dy, dx, wt) in taps {
                // Convolution reads x[p - offset]; the adjoint (correlation)
                // reads x[p + offset].
                let (sy, sx) = if adjoint { (dy, dx) } else { (-dy, -dx) };
                let rr = (r as isize + sy).rem_euclid(hi) as usize;
                let cc = (c as isize + sx).rem_euclid(wi) as usize;
                acc += wt * x[rr * w + cc];
            }
            out[r * w + c] = acc;
        }
    }
}

/// Apply A to a signal.
pub fn apply(op: &LinearOp, x: &Signal) -> Result<Signal> {
    check_len(op, x)?;
    match op {
        LinearOp::Identity => Ok(x.clone()),
        LinearOp::Mask(m) => {
            let data = x.data.iter().zip(m).map(|(a, b)| a * b).collect();
            Signal::new(data, x.shape)
        }
        LinearOp::Conv(kernels) => {
            let plane = x.shape.height * x.shape.width;
            let mut data = vec![0.0; x.len()];
            for (c, taps) in kernels.iter().enumerate() {
                conv_channel(
                    &x.data[c * plane..(c + 1) * plane],
                    x.shape.height,
                    x.shape.width,
                    taps,
                    &mut data[c * plane..(c + 1) * plane],
                    false,
                );
            }
            Signal::new(data, x.shape)
        }
    }
}

/// Apply A^T to a residual. The mask is self-adjoint; the convolution
/// adjoint is periodic correlation.
pub fn adjoint(op: &LinearOp, r: &Signal) -> Result<Signal> {
    check_len(op, r)?;
    match op {
        LinearOp::Identity | LinearOp::Mask(_) => apply(op, r),
        LinearOp::Conv(kernels) => {
            let plane = r.shape.height * r.shape.width;
            let mut data = vec![0.0; r.len()];
            for (c, taps) in kernels.iter().enumerate() {
                conv_channel(
                    &r.data[c * plane..(c + 1) * plane],
                    r.shape.height,
                    r.shape.width,
                    taps,
                    &mut data[c * plane..(c + 1) * plane],
                    true,
                );
            }
            Signal::new(data, r.shape)
        }
    }
}

/// (mu, L): the extreme eigenvalues of A^T A. Identity gives (1, 1); a mask
/// gives 0s and 1s from its entries; a convolution is diagonalized by the
/// DFT, so the bounds are the extreme squared magnitudes of the kernel
/// transfer function.
pub fn gram_bounds(op: &LinearOp, shape: Shape) -> (f64, f64) {
    match op {
        LinearOp::Identity => (1.0, 1.0),
        LinearOp::Mask(m) => {
            let has_zero = m.contains(&0.0);
            let has_one = m.iter().any(|&v| v != 0.0);
            let mu = if has_zero { 0.0 } else { 1.0 };
            let l = if has_one { 1.0 } else { 0.0 };
            (mu, l)
        }
        LinearOp::Conv(kernels) => {
            let (h, w) = (shape.height, shape.width);
            let mut mu = f64::INFINITY;
            let mut l = 0.0f64;
            for taps in kernels {
                for fr in 0..h {
                    for fc in 0..w {
                        let mut re = 0.0;
                        let mut im = 0.0;
                        for &(dy, dx, wt) in taps {
                            let phase = -2.0
                                * std::f64::consts::PI
                                * (fr as f64 * dy as f64 / h as f64
                                    + fc as f64 * dx as f64 / w as f64);
                            re += wt * phase.cos();
                            im += wt * phase.sin();
                        }
                        let mag = re * re + im * im;
                        mu = mu.min(mag);
                        l = l.max(mag);
                    }
                }
            }
            (mu, l)
        }
    }
}
