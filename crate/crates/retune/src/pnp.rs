//! Forward-backward plug-and-play: the elementary step with a pluggable
//! denoiser, a wavelet soft-threshold stand-in denoiser with analytic
//! derivative actions, and the inpainting/deblurring learning wiring for
//! theta = (sigma, tau).

use std::sync::Arc;

use crate::bilevel::{retune_train, BilevelProblem, HistoryRow, TrainConfig};
use crate::core::{PriorKind, Shape, Signal};
use crate::error::{Error, Result};
use crate::forward_models::{adjoint, apply, gram_bounds, LinearOp};
use crate::group_norms::{
    prox_dthreshold_slice, prox_group_l21_slice, prox_vjp_slice, GroupStructure,
};
use crate::hypergrad::{OuterLoss, SquaredError};
use crate::scheme::{ContractionInfo, ElementaryStep};
use crate::wavelet::{dwt2_flat, idwt2_flat, CoeffLayout};

/// A denoiser with analytic derivative actions in both the signal and the
/// noise-level argument.
pub trait Denoiser: Sync {
    fn evaluate(&self, x: &[f64], sigma: f64) -> Vec<f64>;
    /// (v^T dD/dx, v^T dD/dsigma).
    fn vjp(&self, x: &[f64], sigma: f64, v: &[f64]) -> (Vec<f64>, f64);
    fn jvp(&self, x: &[f64], sigma: f64, tx: &[f64], t_sigma: f64) -> Vec<f64>;
    /// A Lipschitz constant in x, when one is known.
    fn lipschitz_hint(&self) -> Option<f64> {
        None
    }
}

/// Stand-in denoiser D^T prox_{sigma ||.||_{2,1}} D: group soft-thresholding
/// in an orthonormal wavelet frame. Nonexpansive by construction, identity
/// at sigma = 0, and every derivative action is exact.
#[derive(Debug, Clone)]
pub struct WaveletThresholdDenoiser {
    pub layout: Arc<CoeffLayout>,
    pub groups: Arc<GroupStructure>,
}

impl WaveletThresholdDenoiser {
    pub fn new(shape: Shape, levels: usize, grouping: PriorKind) -> Result<Self> {
        let layout = Arc::new(CoeffLayout::new(shape, levels)?);
        let groups = Arc::new(GroupStructure::new(&layout, grouping));
        Ok(Self { layout, groups })
    }
}

impl Denoiser for WaveletThresholdDenoiser {
    fn evaluate(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let w = dwt2_flat(x, &self.layout);
        let p = prox_group_l21_slice(&w, sigma, &self.groups);
        idwt2_flat(&p, &self.layout)
    }

    fn vjp(&self, x: &[f64], sigma: f64, v: &[f64]) -> (Vec<f64>, f64) {
        let w = dwt2_flat(x, &self.layout);
        let dv = dwt2_flat(v, &self.layout);
        // The prox Jacobian is symmetric and the frame orthonormal, so the
        // pullback is the same sandwich as the pushforward.
        let jv = prox_vjp_slice(&w, sigma, &dv, &self.groups);
        let wrt_x = idwt2_flat(&jv, &self.layout);
        let dsig = prox_dthreshold_slice(&w, sigma, &self.groups);
        let wrt_sigma = dv.iter().zip(&dsig).map(|(a, b)| a * b).sum();
        (wrt_x, wrt_sigma)
    }

    fn jvp(&self, x: &[f64], sigma: f64, tx: &[f64], t_sigma: f64) -> Vec<f64> {
        let w = dwt2_flat(x, &self.layout);
        let tw = dwt2_flat(tx, &self.layout);
        let mut jt = prox_vjp_slice(&w, sigma, &tw, &self.groups);
        let dsig = prox_dthreshold_slice(&w, sigma, &self.groups);
        for (a, b) in jt.iter_mut().zip(&dsig) {
            *a += t_sigma * b;
        }
        idwt2_flat(&jt, &self.layout)
    }

    fn lipschitz_hint(&self) -> Option<f64> {
        Some(1.0)
    }
}

/// One FB-PnP update x -> D_sigma(x - tau A^T (A x - y)) with
/// theta = (sigma, tau).
#[derive(Clone)]
pub struct PnpStep<D: Denoiser> {
    pub op: LinearOp,
    pub y: Signal,
    pub denoiser: D,
}

impl<D: Denoiser> PnpStep<D> {
    pub fn new(op: LinearOp, y: Signal, denoiser: D) -> Self {
        Self { op, y, denoiser }
    }

    fn data_gradient(&self, x: &[f64]) -> Vec<f64> {
        let xs = Signal { data: x.to_vec(), shape: self.y.shape };
        let r = apply(&self.op, &xs).expect("shape fixed at construction");
        let resid = Signal {
            data: r.data.iter().zip(&self.y.data).map(|(a, b)| a - b).collect(),
            shape: self.y.shape,
        };
        adjoint(&self.op, &resid).expect("shape fixed at construction").data
    }

    fn gram_apply(&self, v: &[f64]) -> Vec<f64> {
        let vs = Signal { data: v.to_vec(), shape: self.y.shape };
        let av = apply(&self.op, &vs).expect("shape fixed at construction");
        adjoint(&self.op, &av).expect("shape fixed at construction").data
    }
}

impl<D: Denoiser> ElementaryStep for PnpStep<D> {
    fn state_dim(&self) -> usize {
        self.y.len()
    }

    fn theta_dim(&self) -> usize {
        2
    }

    fn apply(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
        let (sigma, tau) = (theta[0], theta[1]);
        let g = self.data_gradient(x);
        let z: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - tau * b).collect();
        self.denoiser.evaluate(&z, sigma)
    }

    fn vjp(&self, x: &[f64], theta: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (sigma, tau) = (theta[0], theta[1]);
        let g = self.data_gradient(x);
        let z: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - tau * b).collect();
        let (a, wrt_sigma) = self.denoiser.vjp(&z, sigma, v);
        let gram_a = self.gram_apply(&a);
        let wrt_x: Vec<f64> = a.iter().zip(&gram_a).map(|(ai, gi)| ai - tau * gi).collect();
        let wrt_tau = -a.iter().zip(&g).map(|(ai, gi)| ai * gi).sum::<f64>();
        (wrt_x, vec![wrt_sigma, wrt_tau])
    }

    fn jvp(&self, x: &[f64], theta: &[f64], tx: &[f64], t_theta: &[f64]) -> Vec<f64> {
        let (sigma, tau) = (theta[0], theta[1]);
        let g = self.data_gradient(x);
        let z: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - tau * b).collect();
        let gram_tx = self.gram_apply(tx);
        let tz: Vec<f64> = (0..x.len())
            .map(|i| tx[i] - tau * gram_tx[i] - t_theta[1] * g[i])
            .collect();
        self.denoiser.jvp(&z, sigma, &tz, t_theta[0])
    }

    fn contraction(&self, theta: &[f64]) -> Option<ContractionInfo> {
        let tau = theta[1];
        let (mu, l) = gram_bounds(&self.op, self.y.shape);
        if tau <= 0.0 || tau >= 2.0 / l {
            return None;
        }
        let hint = self.denoiser.lipschitz_hint()?;
        let omega = (1.0 - tau * mu).abs().max((1.0 - tau * l).abs()) * hint;
        // A unit factor certifies nothing; the trainer falls back to a
        // sampled quotient in that case.
        (omega < 1.0).then_some(ContractionInfo { mu, l, omega })
    }
}

struct RestoreItem {
    op: LinearOp,
    y: Signal,
    x0: Vec<f64>,
    loss: SquaredError,
    clean: Signal,
}

/// Image restoration with a learned (sigma, tau) pair: state is the image,
/// start is A^T y, objective the image-domain squared error.
pub struct PnpRestoreProblem<D: Denoiser + Clone> {
    items: Vec<RestoreItem>,
    denoiser: D,
}

impl<D: Denoiser + Clone> PnpRestoreProblem<D> {
    pub fn new(
        pairs: &[(Signal, Signal)],
        ops: &[LinearOp],
        denoiser: D,
    ) -> Result<Self> {
        if pairs.len() != ops.len() {
            return Err(Error::ShapeMismatch("one operator per item required".into()));
        }
        let mut items = Vec::with_capacity(pairs.len());
        for ((clean, observed), op) in pairs.iter().zip(ops) {
            let x0 = adjoint(op, observed)?.data;
            items.push(RestoreItem {
                op: op.clone(),
                y: observed.clone(),
                x0,
                loss: SquaredError { target: clean.data.clone() },
                clean: clean.clone(),
            });
        }
        Ok(Self { items, denoiser })
    }
}

impl<D: Denoiser + Clone> BilevelProblem for PnpRestoreProblem<D> {
    type Step = PnpStep<D>;

    fn n_items(&self) -> usize {
        self.items.len()
    }

    fn theta_dim(&self) -> usize {
        2
    }

    fn step(&self, item: usize, _theta: &[f64]) -> Result<PnpStep<D>> {
        let it = &self.items[item];
        Ok(PnpStep::new(it.op.clone(), it.y.clone(), self.denoiser.clone()))
    }

    fn x0(&self, item: usize) -> Vec<f64> {
        self.items[item].x0.clone()
    }

    fn loss(&self, item: usize) -> &dyn OuterLoss {
        &self.items[item].loss
    }

    fn reconstruct(&self, item: usize, x: &[f64], _theta: &[f64]) -> Signal {
        Signal { data: x.to_vec(), shape: self.items[item].clean.shape }
    }

    fn clean(&self, item: usize) -> &Signal {
        &self.items[item].clean
    }
}

/// Learn (sigma, tau) through the restarted scheme. `params0` holds
/// (log sigma, log tau); returns the trained values with the history.
pub fn learn_sigma_tau<D: Denoiser + Clone>(
    cfg: &TrainConfig,
    problem: &PnpRestoreProblem<D>,
    test: Option<&PnpRestoreProblem<D>>,
    log_sigma0: f64,
    log_tau0: f64,
) -> Result<(f64, f64, Vec<HistoryRow>)> {
    let (p, history) = retune_train(cfg, problem, test, &[log_sigma0, log_tau0])?;
    Ok((p[0].exp(), p[1].exp(), history))
}
