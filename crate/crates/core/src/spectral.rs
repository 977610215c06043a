//! One-sided real FFTs and frequency-band patching.
//!
//! Forward transforms are unnormalized; the inverse carries the `1/T` factor,
//! so `irfft(rfft(x)) == x`. A length-`T` signal has `F = T/2 + 1` bins.

use std::cell::RefCell;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{CatchError, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Number of one-sided bins for a real signal of length `t`.
pub fn bins(t: usize) -> usize {
    t / 2 + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub real: Array2<f64>,
    pub imag: Array2<f64>,
    pub time_length: usize,
}

impl Spectrum {
    pub fn zeros(channels: usize, time_length: usize) -> Self {
        let f = bins(time_length);
        Self {
            real: Array2::zeros((channels, f)),
            imag: Array2::zeros((channels, f)),
            time_length,
        }
    }
}

/// Forward transform of a single real row into `out_re`/`out_im` (length `F`).
pub fn rfft_row(x: &[f64], out_re: &mut [f64], out_im: &mut [f64]) {
    let t = x.len();
    let f = bins(t);
    debug_assert_eq!(out_re.len(), f);
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(t).process(&mut buf));
    for k in 0..f {
        out_re[k] = buf[k].re;
        out_im[k] = buf[k].im;
    }
    // Exact zeros where the transform of a real signal is real.
    out_im[0] = 0.0;
    if t.is_multiple_of(2) {
        out_im[f - 1] = 0.0;
    }
}

/// Inverse of [`rfft_row`]. The imaginary parts of the DC and (even-length)
/// Nyquist bins do not contribute to a real signal and are ignored.
pub fn irfft_row(re: &[f64], im: &[f64], out: &mut [f64]) {
    let t = out.len();
    let f = bins(t);
    debug_assert_eq!(re.len(), f);
    let mut buf = vec![Complex::new(0.0, 0.0); t];
    for k in 0..f {
        buf[k] = Complex::new(re[k], im[k]);
    }
    for k in 1..f {
        let mirror = t - k;
        if mirror != k {
            buf[mirror] = Complex::new(re[k], -im[k]);
        }
    }
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(t).process(&mut buf));
    let scale = 1.0 / t as f64;
    for (o, c) in out.iter_mut().zip(&buf) {
        *o = c.re * scale;
    }
}

/// Per-channel one-sided transform of an `N x T` window.
pub fn rfft(window: ArrayView2<f64>) -> Spectrum {
    let (n, t) = window.dim();
    let mut spec = Spectrum::zeros(n, t);
    let mut row = vec![0.0; t];
    let f = bins(t);
    let mut re = vec![0.0; f];
    let mut im = vec![0.0; f];
    for c in 0..n {
        row.iter_mut().zip(window.row(c)).for_each(|(d, s)| *d = *s);
        rfft_row(&row, &mut re, &mut im);
        spec.real.row_mut(c).iter_mut().zip(&re).for_each(|(d, s)| *d = *s);
        spec.imag.row_mut(c).iter_mut().zip(&im).for_each(|(d, s)| *d = *s);
    }
    spec
}

/// Inverse transform back to an `N x t` window.
pub fn irfft(spectrum: &Spectrum, t: usize) -> Result<Array2<f64>> {
    if spectrum.time_length != t {
        return Err(CatchError::Shape(format!(
            "spectrum built for length {} but inverse requested for {t}",
            spectrum.time_length
        )));
    }
    irfft_parts(spectrum.real.view(), spectrum.imag.view(), t)
}

pub(crate) fn irfft_parts(real: ArrayView2<f64>, imag: ArrayView2<f64>, t: usize) -> Result<Array2<f64>> {
    let f = bins(t);
    if real.dim() != imag.dim() || real.ncols() != f {
        return Err(CatchError::Shape(format!(
            "spectrum parts {:?}/{:?} do not match {f} bins",
            real.dim(),
            imag.dim()
        )));
    }
    let n = real.nrows();
    let mut out = Array2::zeros((n, t));
    let mut re = vec![0.0; f];
    let mut im = vec![0.0; f];
    let mut row = vec![0.0; t];
    for c in 0..n {
        re.iter_mut().zip(real.row(c)).for_each(|(d, s)| *d = *s);
        im.iter_mut().zip(imag.row(c)).for_each(|(d, s)| *d = *s);
        irfft_row(&re, &im, &mut row);
        out.row_mut(c).iter_mut().zip(&row).for_each(|(d, s)| *d = *s);
    }
    Ok(out)
}

/// Adjoint of [`irfft_parts`]: maps a gradient on the time-domain output to
/// gradients on the real and imaginary bins.
pub(crate) fn irfft_adjoint(grad_time: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (n, t) = grad_time.dim();
    let spec = rfft(grad_time);
    let f = bins(t);
    let mut d_re = spec.real;
    let mut d_im = spec.imag;
    for k in 0..f {
        let nyquist = t.is_multiple_of(2) && k == f - 1;
        let w = if k == 0 || nyquist { 1.0 } else { 2.0 } / t as f64;
        for c in 0..n {
            d_re[[c, k]] *= w;
            d_im[[c, k]] *= w;
        }
        if k == 0 || nyquist {
            d_im.column_mut(k).fill(0.0);
        }
    }
    (d_re, d_im)
}

/// Number of patches of width `p` at stride `s` over `f` columns.
pub fn patch_count(f: usize, p: usize, s: usize) -> Result<usize> {
    if p == 0 || s == 0 {
        return Err(CatchError::Config("patch size and stride must be >= 1".into()));
    }
    if p > f {
        return Err(CatchError::Shape(format!("patch size {p} exceeds {f} bins")));
    }
    Ok((f - p) / s + 1)
}

/// Cuts the columns of `array` into `L = (F - p)/s + 1` patches; patch `i`
/// holds columns `[i*s, i*s + p)`. Trailing columns past the last patch are
/// dropped.
pub fn patchify(array: ArrayView2<f64>, p: usize, s: usize) -> Result<Vec<Array2<f64>>> {
    let count = patch_count(array.ncols(), p, s)?;
    Ok((0..count)
        .map(|i| array.slice(s![.., i * s..i * s + p]).to_owned())
        .collect())
}

/// A frequency band: real and imaginary bins side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyPatch {
    pub real_patch: Array2<f64>,
    pub imag_patch: Array2<f64>,
    /// `[N x 2p]`, real columns first.
    pub joint: Array2<f64>,
    pub patch_index: usize,
}

impl FrequencyPatch {
    pub fn width(&self) -> usize {
        self.real_patch.ncols()
    }

    /// Splits the joint matrix back into its real and imaginary halves.
    pub fn split(joint: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if !joint.ncols().is_multiple_of(2) {
            return Err(CatchError::Shape(format!(
                "joint patch width {} is odd",
                joint.ncols()
            )));
        }
        let p = joint.ncols() / 2;
        Ok((
            joint.slice(s![.., ..p]).to_owned(),
            joint.slice(s![.., p..]).to_owned(),
        ))
    }
}

pub fn concat_real_imag(real: Array2<f64>, imag: Array2<f64>, patch_index: usize) -> Result<FrequencyPatch> {
    if real.dim() != imag.dim() {
        return Err(CatchError::Shape(format!(
            "real patch {:?} vs imaginary patch {:?}",
            real.dim(),
            imag.dim()
        )));
    }
    let joint = concatenate(Axis(1), &[real.view(), imag.view()])
        .map_err(|e| CatchError::Shape(e.to_string()))?;
    Ok(FrequencyPatch {
        real_patch: real,
        imag_patch: imag,
        joint,
        patch_index,
    })
}

/// All frequency patches of a spectrum, in band order.
pub fn frequency_patches(spectrum: &Spectrum, p: usize, s: usize) -> Result<Vec<FrequencyPatch>> {
    let reals = patchify(spectrum.real.view(), p, s)?;
    let imags = patchify(spectrum.imag.view(), p, s)?;
    reals
        .into_iter()
        .zip(imags)
        .enumerate()
        .map(|(i, (r, im))| concat_real_imag(r, im, i))
        .collect()
}
