//! Orthonormal multilevel Daubechies-4 (8-tap) 2-D wavelet analysis and
//! synthesis with periodic boundary handling, plus the flat coefficient
//! layout indexed by (scale j, band b, channel c, position k) and the
//! diagonal weight map built from scale and band(-channel) weights.
//!
//! Flattening order is fixed and documented: the approximation block comes
//! first (channel-major, row-major inside), then scales from coarsest (j = J)
//! to finest (j = 1); within a scale the bands run H, V, D; within a band the
//! channels run 0..C; each subband block is row-major. With periodic
//! extension and even dyadic sizes the transform matrix is exactly
//! orthogonal, so synthesis is both the adjoint and the inverse.

use std::sync::Arc;

use crate::core::{HyperParams, PriorKind, Shape, Signal};
use crate::error::{Error, Result};

/// Daubechies-4 scaling (lowpass analysis) filter, sum = sqrt(2).
pub const DB4_LO: [f64; 8] = [
    0.230_377_813_308_855_23,
    0.714_846_570_552_541_5,
    0.630_880_767_929_590_4,
    -0.027_983_769_416_983_85,
    -0.187_034_811_718_881_14,
    0.030_841_381_835_986_965,
    0.032_883_011_666_982_945,
    -0.010_597_401_784_997_278,
];

/// Quadrature-mirror highpass filter g_k = (-1)^k h_{7-k}.
pub const DB4_HI: [f64; 8] = [
    DB4_LO[7],
    -DB4_LO[6],
    DB4_LO[5],
    -DB4_LO[4],
    DB4_LO[3],
    -DB4_LO[2],
    DB4_LO[1],
    -DB4_LO[0],
];

/// Detail band orientation. H is the row-highpass/column-lowpass quadrant,
/// V the row-lowpass/column-highpass quadrant, D the doubly-highpass one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Horizontal,
    Vertical,
    Diagonal,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Horizontal, Band::Vertical, Band::Diagonal];

    pub fn index(self) -> usize {
        match self {
            Band::Horizontal => 0,
            Band::Vertical => 1,
            Band::Diagonal => 2,
        }
    }
}

/// Index arithmetic for the flat coefficient vector of a (shape, levels) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoeffLayout {
    pub shape: Shape,
    pub levels: usize,
    /// Per-channel approximation block length (H/2^J)*(W/2^J).
    approx_len: usize,
    /// Offset of each scale's detail region, indexed by j-1.
    scale_base: Vec<usize>,
}

impl CoeffLayout {
    pub fn new(shape: Shape, levels: usize) -> Result<Self> {
        if levels == 0
            || !shape.height.is_multiple_of(1 << levels)
            || !shape.width.is_multiple_of(1 << levels)
        {
            return Err(Error::NonDyadic { h: shape.height, w: shape.width, levels });
        }
        let approx_len = (shape.height >> levels) * (shape.width >> levels);
        let mut scale_base = vec![0usize; levels];
        let mut offset = approx_len * shape.channels;
        // Scales are laid out coarsest first.
        for j in (1..=levels).rev() {
            scale_base[j - 1] = offset;
            offset += 3 * shape.channels * Self::detail_len_for(shape, j);
        }
        debug_assert_eq!(offset, shape.len());
        Ok(Self { shape, levels, approx_len, scale_base })
    }

    fn detail_len_for(shape: Shape, j: usize) -> usize {
        (shape.height >> j) * (shape.width >> j)
    }

    pub fn total_len(&self) -> usize {
        self.shape.len()
    }

    /// (rows, cols) of each subband at scale j.
    pub fn subband_dims(&self, j: usize) -> (usize, usize) {
        (self.shape.height >> j, self.shape.width >> j)
    }

    /// Length of one detail subband block at scale j.
    pub fn detail_len(&self, j: usize) -> usize {
        Self::detail_len_for(self.shape, j)
    }

    pub fn approx_len(&self) -> usize {
        self.approx_len
    }

    pub fn approx_range(&self, c: usize) -> std::ops::Range<usize> {
        c * self.approx_len..(c + 1) * self.approx_len
    }

    /// Full approximation region across channels.
    pub fn approx_full(&self) -> std::ops::Range<usize> {
        0..self.approx_len * self.shape.channels
    }

    pub fn detail_range(&self, j: usize, band: Band, c: usize) -> std::ops::Range<usize> {
        let len = self.detail_len(j);
        let start = self.scale_base[j - 1] + (band.index() * self.shape.channels + c) * len;
        start..start + len
    }
}

/// Multilevel coefficients as a flat buffer plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletCoeffs {
    pub data: Vec<f64>,
    pub layout: Arc<CoeffLayout>,
}

impl WaveletCoeffs {
    pub fn zeros(layout: Arc<CoeffLayout>) -> Self {
        Self { data: vec![0.0; layout.total_len()], layout }
    }

    pub fn from_flat(data: Vec<f64>, layout: Arc<CoeffLayout>) -> Result<Self> {
        if data.len() != layout.total_len() {
            return Err(Error::ShapeMismatch(format!(
                "coefficient buffer length {} does not match layout length {}",
                data.len(),
                layout.total_len()
            )));
        }
        Ok(Self { data, layout })
    }
}

fn analyze_periodic(x: &[f64], lo: &mut [f64], hi: &mut [f64]) {
    let n = x.len();
    for m in 0..n / 2 {
        let mut a = 0.0;
        let mut d = 0.0;
        for k in 0..8 {
            let xi = x[(2 * m + k) % n];
            a += DB4_LO[k] * xi;
            d += DB4_HI[k] * xi;
        }
        lo[m] = a;
        hi[m] = d;
    }
}

/// Exact adjoint of `analyze_periodic`; by orthonormality also its inverse.
fn synthesize_periodic(lo: &[f64], hi: &[f64], x: &mut [f64]) {
    let n = x.len();
    x.fill(0.0);
    for m in 0..n / 2 {
        for k in 0..8 {
            let i = (2 * m + k) % n;
            x[i] += DB4_LO[k] * lo[m] + DB4_HI[k] * hi[m];
        }
    }
}

/// One separable level: rows first, then columns. Returns (ll, h, v, d),
/// each (rows/2)*(cols/2), row-major.
fn dwt2_single(input: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let (hr, hc) = (rows / 2, cols / 2);
    let mut row_lo = vec![0.0; rows * hc];
    let mut row_hi = vec![0.0; rows * hc];
    let mut lo_buf = vec![0.0; hc.max(hr)];
    let mut hi_buf = vec![0.0; hc.max(hr)];
    for r in 0..rows {
        analyze_periodic(&input[r * cols..(r + 1) * cols], &mut lo_buf[..hc], &mut hi_buf[..hc]);
        row_lo[r * hc..(r + 1) * hc].copy_from_slice(&lo_buf[..hc]);
        row_hi[r * hc..(r + 1) * hc].copy_from_slice(&hi_buf[..hc]);
    }
    let mut ll = vec![0.0; hr * hc];
    let mut band_h = vec![0.0; hr * hc];
    let mut band_v = vec![0.0; hr * hc];
    let mut band_d = vec![0.0; hr * hc];
    let mut col = vec![0.0; rows];
    for c in 0..hc {
        for r in 0..rows {
            col[r] = row_lo[r * hc + c];
        }
        analyze_periodic(&col, &mut lo_buf[..hr], &mut hi_buf[..hr]);
        for r in 0..hr {
            ll[r * hc + c] = lo_buf[r];
            band_v[r * hc + c] = hi_buf[r];
        }
        for r in 0..rows {
            col[r] = row_hi[r * hc + c];
        }
        analyze_periodic(&col, &mut lo_buf[..hr], &mut hi_buf[..hr]);
        for r in 0..hr {
            band_h[r * hc + c] = lo_buf[r];
            band_d[r * hc + c] = hi_buf[r];
        }
    }
    (ll, band_h, band_v, band_d)
}

fn idwt2_single(
    ll: &[f64],
    band_h: &[f64],
    band_v: &[f64],
    band_d: &[f64],
    rows: usize,
    cols: usize,
) -> Vec<f64> {
    let (hr, hc) = (rows / 2, cols / 2);
    let mut row_lo = vec![0.0; rows * hc];
    let mut row_hi = vec![0.0; rows * hc];
    let mut lo_buf = vec![0.0; hr.max(hc)];
    let mut hi_buf = vec![0.0; hr.max(hc)];
    let mut col = vec![0.0; rows];
    for c in 0..hc {
        for r in 0..hr {
            lo_buf[r] = ll[r * hc + c];
            hi_buf[r] = band_v[r * hc + c];
        }
        synthesize_periodic(&lo_buf[..hr], &hi_buf[..hr], &mut col);
        for r in 0..rows {
            row_lo[r * hc + c] = col[r];
        }
        for r in 0..hr {
            lo_buf[r] = band_h[r * hc + c];
            hi_buf[r] = band_d[r * hc + c];
        }
        synthesize_periodic(&lo_buf[..hr], &hi_buf[..hr], &mut col);
        for r in 0..rows {
            row_hi[r * hc + c] = col[r];
        }
    }
    let mut out = vec![0.0; rows * cols];
    let mut row = vec![0.0; cols];
    for r in 0..rows {
        synthesize_periodic(&row_lo[r * hc..(r + 1) * hc], &row_hi[r * hc..(r + 1) * hc], &mut row);
        out[r * cols..(r + 1) * cols].copy_from_slice(&row);
    }
    out
}

/// Multilevel forward transform, one set of subbands per channel.
pub fn dwt2(x: &Signal, levels: usize) -> Result<WaveletCoeffs> {
    let layout = Arc::new(CoeffLayout::new(x.shape, levels)?);
    let data = dwt2_flat(&x.data, &layout);
    Ok(WaveletCoeffs { data, layout })
}

/// Forward transform on a raw channel-major buffer matching the layout's
/// shape; avoids container shuffling in hot paths.
pub fn dwt2_flat(data: &[f64], layout: &CoeffLayout) -> Vec<f64> {
    debug_assert_eq!(data.len(), layout.total_len());
    let shape = layout.shape;
    let plane = shape.height * shape.width;
    let mut out = vec![0.0; layout.total_len()];
    for c in 0..shape.channels {
        let mut cur = data[c * plane..(c + 1) * plane].to_vec();
        let mut rows = shape.height;
        let mut cols = shape.width;
        for j in 1..=layout.levels {
            let (ll, bh, bv, bd) = dwt2_single(&cur, rows, cols);
            out[layout.detail_range(j, Band::Horizontal, c)].copy_from_slice(&bh);
            out[layout.detail_range(j, Band::Vertical, c)].copy_from_slice(&bv);
            out[layout.detail_range(j, Band::Diagonal, c)].copy_from_slice(&bd);
            cur = ll;
            rows /= 2;
            cols /= 2;
        }
        out[layout.approx_range(c)].copy_from_slice(&cur);
    }
    out
}

/// Inverse transform on a raw coefficient buffer.
pub fn idwt2_flat(coeffs: &[f64], layout: &CoeffLayout) -> Vec<f64> {
    debug_assert_eq!(coeffs.len(), layout.total_len());
    let shape = layout.shape;
    let plane = shape.height * shape.width;
    let mut data = vec![0.0; shape.len()];
    for c in 0..shape.channels {
        let mut cur = coeffs[layout.approx_range(c)].to_vec();
        for j in (1..=layout.levels).rev() {
            let (hr, hc) = layout.subband_dims(j);
            let bh = &coeffs[layout.detail_range(j, Band::Horizontal, c)];
            let bv = &coeffs[layout.detail_range(j, Band::Vertical, c)];
            let bd = &coeffs[layout.detail_range(j, Band::Diagonal, c)];
            cur = idwt2_single(&cur, bh, bv, bd, hr * 2, hc * 2);
        }
        data[c * plane..(c + 1) * plane].copy_from_slice(&cur);
    }
    data
}

/// Multilevel inverse (= adjoint) transform.
pub fn idwt2(w: &WaveletCoeffs) -> Result<Signal> {
    if w.data.len() != w.layout.total_len() {
        return Err(Error::ShapeMismatch("coefficients inconsistent with layout".into()));
    }
    Signal::new(idwt2_flat(&w.data, &w.layout), w.layout.shape)
}

/// Per-coefficient indices into the flat prior parameter vector
/// [lambda_1..lambda_J, Lambda_...]. Approximation entries carry -1 and a
/// fixed weight of 1 so the diagonal map stays invertible without
/// penalizing the approximation band.
#[derive(Debug, Clone)]
pub struct ThetaMap {
    pub layout: Arc<CoeffLayout>,
    pub prior_kind: PriorKind,
    lambda_idx: Vec<i32>,
    cap_idx: Vec<i32>,
}

impl ThetaMap {
    pub fn new(layout: Arc<CoeffLayout>, prior_kind: PriorKind) -> Self {
        let n = layout.total_len();
        let mut lambda_idx = vec![-1i32; n];
        let mut cap_idx = vec![-1i32; n];
        let levels = layout.levels;
        let channels = layout.shape.channels;
        for j in 1..=levels {
            for band in Band::ALL {
                for c in 0..channels {
                    let cap = match prior_kind {
                        PriorKind::BandsChannels => band.index() * channels + c,
                        PriorKind::Bands => band.index(),
                    };
                    for i in layout.detail_range(j, band, c) {
                        lambda_idx[i] = (j - 1) as i32;
                        cap_idx[i] = (levels + cap) as i32;
                    }
                }
            }
        }
        Self { layout, prior_kind, lambda_idx, cap_idx }
    }

    /// Number of prior parameters J + B.
    pub fn theta_dim(&self) -> usize {
        self.layout.levels
            + match self.prior_kind {
                PriorKind::BandsChannels => 3 * self.layout.shape.channels,
                PriorKind::Bands => 3,
            }
    }

    /// Diagonal weights theta_i = lambda_j sqrt(Lambda_b(,c)), 1 on approx.
    pub fn diag(&self, theta: &[f64]) -> Vec<f64> {
        debug_assert_eq!(theta.len(), self.theta_dim());
        let mut out = vec![1.0; self.layout.total_len()];
        for i in 0..out.len() {
            if self.lambda_idx[i] >= 0 {
                out[i] =
                    theta[self.lambda_idx[i] as usize] * theta[self.cap_idx[i] as usize].sqrt();
            }
        }
        out
    }

    /// Accumulate a per-coefficient gradient on the diagonal weights back to
    /// the flat parameter vector (effective-theta space).
    #[allow(clippy::needless_range_loop)]
    pub fn pullback(&self, grad_diag: &[f64], theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.theta_dim()];
        for i in 0..grad_diag.len() {
            let li = self.lambda_idx[i];
            if li < 0 {
                continue;
            }
            let ci = self.cap_idx[i] as usize;
            let lam = theta[li as usize];
            let sqrt_cap = theta[ci].sqrt();
            out[li as usize] += grad_diag[i] * sqrt_cap;
            out[ci] += grad_diag[i] * lam / (2.0 * sqrt_cap);
        }
        out
    }

    /// Tangent of the diagonal weights induced by a parameter tangent.
    #[allow(clippy::needless_range_loop)]
    pub fn pushforward(&self, t_theta: &[f64], theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.layout.total_len()];
        for i in 0..out.len() {
            let li = self.lambda_idx[i];
            if li < 0 {
                continue;
            }
            let ci = self.cap_idx[i] as usize;
            let lam = theta[li as usize];
            let sqrt_cap = theta[ci].sqrt();
            out[i] = t_theta[li as usize] * sqrt_cap
                + t_theta[ci] * lam / (2.0 * sqrt_cap);
        }
        out
    }

    /// True for indices in the approximation block.
    pub fn is_approx(&self, i: usize) -> bool {
        self.lambda_idx[i] < 0
    }
}

/// Multiply detail coefficients by (lambda_j sqrt(Lambda))^power; the
/// approximation band is multiplied by 1. Powers -2, -1 and 1 cover the
/// diagonal map, its inverse and its inverse square.
pub fn weight_map_apply(w: &WaveletCoeffs, p: &HyperParams, power: i32) -> Result<WaveletCoeffs> {
    let map = ThetaMap::new(w.layout.clone(), p.prior_kind);
    let theta = p.prior_theta();
    if theta.len() != map.theta_dim() {
        return Err(Error::ShapeMismatch(format!(
            "prior has {} parameters, layout expects {}",
            theta.len(),
            map.theta_dim()
        )));
    }
    let diag = map.diag(&theta);
    let data = w
        .data
        .iter()
        .zip(&diag)
        .map(|(v, d)| v * d.powi(power))
        .collect();
    Ok(WaveletCoeffs { data, layout: w.layout.clone() })
}
