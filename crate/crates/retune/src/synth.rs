//! Seeded synthetic data: piecewise-smooth RGB images (sums of random
//! rectangles over smooth gradients, values in [0,1]), channel-dependent
//! Gaussian noise, dataset assembly, and small wavelet-denoising instances
//! sized for exact-oracle bound certification.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::core::{Dataset, PriorKind, Shape, Signal};
use crate::error::Result;
use crate::hypergrad::SquaredError;
use crate::scheme::{default_tau, prior_structures, FbStep};
use crate::wavelet::CoeffLayout;

/// One piecewise-smooth image: a gentle per-channel gradient plus 3..=6
/// shared rectangles with channel-dependent amplitudes, clamped to [0,1].
pub fn synth_image(shape: Shape, rng: &mut ChaCha8Rng) -> Signal {
    let (h, w, channels) = (shape.height, shape.width, shape.channels);
    let mut data = vec![0.0; shape.len()];
    for c in 0..channels {
        let base = rng.gen_range(0.25..0.75);
        let gx = rng.gen_range(-0.25..0.25);
        let gy = rng.gen_range(-0.25..0.25);
        for r in 0..h {
            for col in 0..w {
                data[(c * h + r) * w + col] =
                    base + gx * col as f64 / w as f64 + gy * r as f64 / h as f64;
            }
        }
    }
    let n_rects = rng.gen_range(3..=6);
    for _ in 0..n_rects {
        let r0 = rng.gen_range(0..h);
        let r1 = rng.gen_range(r0..h.min(r0 + h / 2 + 1));
        let c0 = rng.gen_range(0..w);
        let c1 = rng.gen_range(c0..w.min(c0 + w / 2 + 1));
        let amp = rng.gen_range(-0.45..0.45);
        for c in 0..channels {
            let channel_amp = amp + rng.gen_range(-0.15..0.15);
            for r in r0..=r1 {
                for col in c0..=c1 {
                    data[(c * h + r) * w + col] += channel_amp;
                }
            }
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Signal { data, shape }
}

/// Additive white Gaussian noise with one standard deviation per channel
/// (cycled when fewer sigmas than channels are given).
pub fn add_channel_noise(x: &Signal, sigmas: &[f64], rng: &mut ChaCha8Rng) -> Signal {
    let plane = x.shape.height * x.shape.width;
    let mut data = x.data.clone();
    for c in 0..x.shape.channels {
        let sigma = sigmas[c % sigmas.len()];
        for v in data[c * plane..(c + 1) * plane].iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += sigma * e;
        }
    }
    Signal { data, shape: x.shape }
}

/// Seeded dataset of (clean, noisy) pairs.
pub fn denoising_dataset(
    shape: Shape,
    count: usize,
    sigmas: &[f64],
    seed: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let clean = synth_image(shape, &mut rng);
        let noisy = add_channel_noise(&clean, sigmas, &mut rng);
        pairs.push((clean, noisy));
    }
    Dataset::new(pairs, seed)
}

/// Pairs degraded by a linear operator plus noise: y = A xbar + eps.
pub fn restoration_dataset(
    shape: Shape,
    count: usize,
    op: impl Fn(usize) -> crate::forward_models::LinearOp,
    sigma: f64,
    seed: u64,
) -> Result<(Dataset, Vec<crate::forward_models::LinearOp>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    let mut ops = Vec::with_capacity(count);
    for i in 0..count {
        let clean = synth_image(shape, &mut rng);
        let a = op(i);
        let degraded = crate::forward_models::apply(&a, &clean)?;
        let noisy = add_channel_noise(&degraded, &[sigma], &mut rng);
        pairs.push((clean, noisy));
        ops.push(a);
    }
    Ok((Dataset::new(pairs, seed)?, ops))
}

/// A small wavelet-denoising instance with everything the bound
/// certification needs: the forward-backward step at its optimal stepsize,
/// the effective parameter vector, a state-space squared-error loss with a
/// constant target, and the transformed-observation start.
///
/// The construction keeps every coefficient group comfortably above the
/// shrinkage threshold so the fixed point sits away from prox kinks and the
/// certified contraction factor is attained by active modes.
pub struct WaveletBoundInstance {
    pub step: FbStep,
    pub theta: Vec<f64>,
    pub loss: SquaredError,
    pub x0: Vec<f64>,
}

pub fn wavelet_bound_instance(side: usize, levels: usize, seed: u64) -> WaveletBoundInstance {
    wavelet_bound_instance_in(side, levels, seed, (0.3, 0.8))
}

/// As `wavelet_bound_instance` with the scale-weight range exposed; a
/// narrower range away from the extremes keeps the contraction factor in a
/// band where geometric tails dominate quickly.
pub fn wavelet_bound_instance_in(
    side: usize,
    levels: usize,
    seed: u64,
    lambda_range: (f64, f64),
) -> WaveletBoundInstance {
    let shape = Shape::new(side, side, 1);
    let layout = Arc::new(CoeffLayout::new(shape, levels).expect("dyadic side"));
    let (map, groups) = prior_structures(layout.clone(), PriorKind::Bands);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Clean coefficients with unit-scale magnitudes, noisy observation.
    let n = layout.total_len();
    let wbar: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.8..2.0)
        })
        .collect();
    let dy: Vec<f64> = wbar
        .iter()
        .map(|&v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            v + 0.1 * e
        })
        .collect();
    // Scale weights below one; uniform band weights keep the per-group
    // diagonal constant so the certified rate is attained.
    let mut theta: Vec<f64> = (0..levels)
        .map(|_| rng.gen_range(lambda_range.0..lambda_range.1))
        .collect();
    theta.extend([1.0, 1.0, 1.0]);
    let diag = map.diag(&theta);
    let tau = default_tau(&diag);
    let step = FbStep::new(map, groups, dy.clone(), tau).expect("valid stepsize");
    // Loss target: the clean coefficients carried into the reweighted
    // state space at the evaluation parameters, held constant thereafter.
    let target: Vec<f64> = wbar.iter().zip(&diag).map(|(w, d)| w * d).collect();
    WaveletBoundInstance { step, theta, loss: SquaredError { target }, x0: dy }
}
