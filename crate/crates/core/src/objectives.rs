//! Training objectives: time and frequency reconstruction, the mask-aware
//! contrastive clustering term, and the mask-density regularizer.

use ndarray::{Array2, ArrayView2};

use crate::error::{CatchError, Result};
use crate::nn::logsumexp;

/// Exponents above this are clamped in mask gradients, where a masked-out
/// score can exceed every kept one by an arbitrary margin.
const MAX_EXP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rec_time: f64,
    pub rec_freq: f64,
    pub clustering: f64,
    pub regular: f64,
    /// Temperature of the clustering term.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec_time: 1.0,
            rec_freq: 1.0,
            clustering: 0.1,
            regular: 0.1,
            tau: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.rec_time, self.rec_freq, self.clustering, self.regular];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(CatchError::Config(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        if !(self.tau > 0.0) {
            return Err(CatchError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub rec_time: f64,
    pub rec_freq: f64,
    /// Averaged over layers, patches and heads.
    pub clustering: f64,
    /// Averaged over patches.
    pub regular: f64,
}

impl LossComponents {
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            rec_time: self.rec_time * k,
            rec_freq: self.rec_freq * k,
            clustering: self.clustering * k,
            regular: self.regular * k,
        }
    }

    pub fn add(&mut self, other: &Self) {
        self.rec_time += other.rec_time;
        self.rec_freq += other.rec_freq;
        self.clustering += other.clustering;
        self.regular += other.regular;
    }
}

/// Weighted sum of the four components.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    let parts = [
        ("rec_time", c.rec_time),
        ("rec_freq", c.rec_freq),
        ("clustering", c.clustering),
        ("regular", c.regular),
    ];
    if let Some((name, v)) = parts.iter().find(|(_, v)| !v.is_finite()) {
        return Err(CatchError::NonFinite(format!("loss component {name} = {v}")));
    }
    Ok(w.rec_time * c.rec_time + w.rec_freq * c.rec_freq + w.clustering * c.clustering + w.regular * c.regular)
}

fn same_shape(a: ArrayView2<f64>, b: ArrayView2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(CatchError::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean squared residual over all `N * T` entries.
pub fn rec_loss_time(x: ArrayView2<f64>, recon: ArrayView2<f64>) -> Result<f64> {
    same_shape(x, recon, "time reconstruction")?;
    let count = x.len() as f64;
    Ok(x.iter().zip(recon.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / count)
}

/// Gradient of [`rec_loss_time`] with respect to `recon`.
pub fn rec_loss_time_grad(x: ArrayView2<f64>, recon: ArrayView2<f64>) -> Array2<f64> {
    let scale = 2.0 / x.len() as f64;
    (&recon - &x) * scale
}

/// Mean absolute residual of the real bins plus that of the imaginary bins.
pub fn rec_loss_freq(
    real: ArrayView2<f64>,
    imag: ArrayView2<f64>,
    recon_real: ArrayView2<f64>,
    recon_imag: ArrayView2<f64>,
) -> Result<f64> {
    same_shape(real, recon_real, "real spectrum")?;
    same_shape(imag, recon_imag, "imaginary spectrum")?;
    same_shape(real, imag, "spectrum parts")?;
    let mae = |a: ArrayView2<f64>, b: ArrayView2<f64>| {
        a.iter().zip(b.iter()).map(|(u, v)| (u - v).abs()).sum::<f64>() / a.len() as f64
    };
    Ok(mae(real, recon_real) + mae(imag, recon_imag))
}

/// Gradient of [`rec_loss_freq`] with respect to the reconstructed parts
/// (subgradient 0 at exact ties).
pub fn rec_loss_freq_grad(
    real: ArrayView2<f64>,
    imag: ArrayView2<f64>,
    recon_real: ArrayView2<f64>,
    recon_imag: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let scale = 1.0 / real.len() as f64;
    let sign = |d: f64| if d > 0.0 { scale } else if d < 0.0 { -scale } else { 0.0 };
    (
        (&recon_real - &real).mapv(sign),
        (&recon_imag - &imag).mapv(sign),
    )
}

/// Contrastive term over one attention map: for each query channel, the
/// log-ratio of attention mass kept by the mask to the total mass, at
/// temperature `tau`. `masked` holds the raw scores with masked-out entries
/// replaced by a large negative sentinel.
pub fn clustering_loss(raw: ArrayView2<f64>, masked: ArrayView2<f64>, mask: ArrayView2<f64>, tau: f64) -> f64 {
    debug_assert_eq!(raw.dim(), mask.dim());
    let n = raw.nrows() as f64;
    let mut acc = 0.0;
    for (r, s) in raw.rows().into_iter().zip(masked.rows()) {
        let num = logsumexp(s.iter().map(|v| v / tau));
        let den = logsumexp(r.iter().map(|v| v / tau));
        acc += num - den;
    }
    -acc / n
}

/// Log of `sum_m mask[m] * exp(row[m] / tau)`, shifted by the largest score
/// among entries with positive mask weight.
fn masked_lse(row: ndarray::ArrayView1<f64>, mask: ndarray::ArrayView1<f64>, tau: f64) -> f64 {
    let max = row
        .iter()
        .zip(mask.iter())
        .filter(|(_, m)| **m > 0.0)
        .map(|(v, _)| v / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = row
        .iter()
        .zip(mask.iter())
        .map(|(v, m)| m * (v / tau - max).exp())
        .sum();
    max + sum.ln()
}

/// Continuous form of [`clustering_loss`] in which the mask weights each
/// `exp` term; equal to it for binary masks.
pub fn clustering_loss_soft(raw: ArrayView2<f64>, mask: ArrayView2<f64>, tau: f64) -> f64 {
    let n = raw.nrows() as f64;
    let acc: f64 = raw
        .rows()
        .into_iter()
        .zip(mask.rows())
        .map(|(r, m)| masked_lse(r, m, tau) - logsumexp(r.iter().map(|v| v / tau)))
        .sum();
    -acc / n
}

/// Value of [`clustering_loss_soft`] and its gradients with respect to the
/// raw scores and the mask.
pub fn clustering_loss_grad(raw: ArrayView2<f64>, mask: ArrayView2<f64>, tau: f64) -> (f64, Array2<f64>, Array2<f64>) {
    let (rows, cols) = raw.dim();
    let n = rows as f64;
    let mut d_raw = Array2::zeros((rows, cols));
    let mut d_mask = Array2::zeros((rows, cols));
    let mut acc = 0.0;
    for k in 0..rows {
        let r = raw.row(k);
        let m = mask.row(k);
        let num = masked_lse(r, m, tau);
        let den = logsumexp(r.iter().map(|v| v / tau));
        acc += num - den;
        for j in 0..cols {
            let scaled = r[j] / tau;
            let kept = (scaled - num).min(MAX_EXP).exp();
            let total = (scaled - den).exp();
            d_raw[[k, j]] = (total - m[j] * kept) / (n * tau);
            d_mask[[k, j]] = -kept / n;
        }
    }
    (-acc / n, d_raw, d_mask)
}

/// `||I - M||_F / N`.
pub fn regular_loss(mask: ArrayView2<f64>) -> f64 {
    let n = mask.nrows();
    frobenius_from_identity(mask) / n as f64
}

fn frobenius_from_identity(mask: ArrayView2<f64>) -> f64 {
    mask.indexed_iter()
        .map(|((i, j), m)| {
            let d = if i == j { 1.0 - m } else { -m };
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Gradient of [`regular_loss`]; zero at `M = I` where the norm is not
/// differentiable.
pub fn regular_loss_grad(mask: ArrayView2<f64>) -> Array2<f64> {
    let n = mask.nrows();
    let norm = frobenius_from_identity(mask);
    if norm == 0.0 {
        return Array2::zeros(mask.dim());
    }
    Array2::from_shape_fn(mask.dim(), |(i, j)| {
        let eye = if i == j { 1.0 } else { 0.0 };
        (mask[[i, j]] - eye) / (n as f64 * norm)
    })
}
