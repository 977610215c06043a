//! Per-timestamp anomaly scores from reconstructions.
//!
//! The time score is the channel-mean squared residual at each point. The
//! frequency score slides a short patch over the window, compares the
//! spectra of the original and reconstructed patch, and gives every
//! timestamp the average discrepancy of the patches that cover it.

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{CatchError, Result};
use crate::model::{self, ModelConfig, ModelParams};
use crate::seriesio::{self, LabeledSeries};
use crate::spectral;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// Frequency score from every covering patch, per point.
    Point,
    /// One whole-window frequency error copied to every point (ablation).
    Window,
}

impl std::str::FromStr for ScoreMode {
    type Err = CatchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(ScoreMode::Point),
            "window" => Ok(ScoreMode::Window),
            other => Err(CatchError::Unknown {
                kind: "score mode",
                name: other.to_string(),
                valid: "point, window".into(),
            }),
        }
    }
}

impl ScoreMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMode::Point => "point",
            ScoreMode::Window => "window",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreConfig {
    /// Time-domain patch length for the frequency score.
    pub inference_patch_size: usize,
    pub inference_patch_stride: usize,
    pub score_lambda: f64,
    /// Fraction of points flagged by [`apply_threshold`].
    pub threshold_ratio: f64,
    pub mode: ScoreMode,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            inference_patch_size: 16,
            inference_patch_stride: 1,
            score_lambda: 0.05,
            threshold_ratio: 0.05,
            mode: ScoreMode::Point,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self, window: usize) -> Result<()> {
        if self.inference_patch_size == 0 || self.inference_patch_size > window {
            return Err(CatchError::Config(format!(
                "inference_patch_size {} must be in 1..={window}",
                self.inference_patch_size
            )));
        }
        if self.inference_patch_stride == 0 {
            return Err(CatchError::Config("inference_patch_stride must be >= 1".into()));
        }
        if !(self.score_lambda >= 0.0) || !self.score_lambda.is_finite() {
            return Err(CatchError::Config(format!("score_lambda must be >= 0, got {}", self.score_lambda)));
        }
        if !(self.threshold_ratio > 0.0 && self.threshold_ratio < 1.0) {
            return Err(CatchError::Config(format!(
                "threshold_ratio must be in (0, 1), got {}",
                self.threshold_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub time_score: Vec<f64>,
    pub freq_score: Vec<f64>,
    pub final_score: Vec<f64>,
    pub predictions: Option<Vec<u8>>,
    pub labels: Option<Vec<u8>>,
}

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.final_score.len()
    }

    pub fn is_empty(&self) -> bool {
        self.final_score.is_empty()
    }
}

fn same_shape(x: ArrayView2<f64>, recon: ArrayView2<f64>) -> Result<()> {
    if x.dim() != recon.dim() {
        return Err(CatchError::Shape(format!("scores need equal shapes: {:?} vs {:?}", x.dim(), recon.dim())));
    }
    Ok(())
}

/// Channel-mean squared residual per timestamp.
pub fn time_score(x: ArrayView2<f64>, recon: ArrayView2<f64>) -> Result<Vec<f64>> {
    same_shape(x, recon)?;
    let n = x.nrows() as f64;
    Ok((0..x.ncols())
        .map(|t| x.column(t).iter().zip(recon.column(t)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
        .collect())
}

/// Per-channel spectral discrepancy of two equal-length segments: mean
/// absolute difference of the real bins plus that of the imaginary bins.
pub fn spectral_discrepancy(x: ArrayView2<f64>, recon: ArrayView2<f64>) -> Vec<f64> {
    let a = spectral::rfft(x);
    let b = spectral::rfft(recon);
    let f = a.real.ncols() as f64;
    (0..x.nrows())
        .map(|c| {
            let re: f64 = a.real.row(c).iter().zip(b.real.row(c)).map(|(u, v)| (u - v).abs()).sum();
            let im: f64 = a.imag.row(c).iter().zip(b.imag.row(c)).map(|(u, v)| (u - v).abs()).sum();
            (re + im) / f
        })
        .collect()
}

/// Point-granularity frequency score with stride-1 patches.
pub fn frequency_point_score(x: ArrayView2<f64>, recon: ArrayView2<f64>, patch: usize) -> Result<Vec<f64>> {
    frequency_point_score_strided(x, recon, patch, 1)
}

/// General-stride form. Points after the last full patch receive the
/// discrepancy of the trailing segment they form.
pub fn frequency_point_score_strided(
    x: ArrayView2<f64>,
    recon: ArrayView2<f64>,
    patch: usize,
    stride: usize,
) -> Result<Vec<f64>> {
    same_shape(x, recon)?;
    let (n, t) = x.dim();
    if patch == 0 || patch > t {
        return Err(CatchError::Config(format!("inference patch size {patch} must be in 1..={t}")));
    }
    if stride == 0 {
        return Err(CatchError::Config("inference patch stride must be >= 1".into()));
    }
    let count = (t - patch) / stride + 1;
    let covered = patch + (count - 1) * stride;
    let mut sum = Array2::<f64>::zeros((n, t));
    let mut coverage = vec![0usize; t];
    for k in 0..count {
        let start = k * stride;
        let cols = s![.., start..start + patch];
        let d = spectral_discrepancy(x.slice(cols), recon.slice(cols));
        for tt in start..start + patch {
            coverage[tt] += 1;
            for (c, v) in d.iter().enumerate() {
                sum[[c, tt]] += v;
            }
        }
    }
    if covered < t {
        let cols = s![.., covered..];
        let d = spectral_discrepancy(x.slice(cols), recon.slice(cols));
        for tt in covered..t {
            coverage[tt] = 1;
            for (c, v) in d.iter().enumerate() {
                sum[[c, tt]] = *v;
            }
        }
    }
    Ok((0..t)
        .map(|tt| sum.column(tt).sum() / (n as f64 * coverage[tt] as f64))
        .collect())
}

/// Whole-window frequency error, channel-averaged, for every point.
pub fn frequency_window_score(x: ArrayView2<f64>, recon: ArrayView2<f64>) -> Result<Vec<f64>> {
    same_shape(x, recon)?;
    let d = spectral_discrepancy(x, recon);
    let v = d.iter().sum::<f64>() / d.len() as f64;
    Ok(vec![v; x.ncols()])
}

pub fn combine_scores(time: &[f64], freq: &[f64], score_lambda: f64) -> Result<Vec<f64>> {
    if time.len() != freq.len() {
        return Err(CatchError::Shape(format!(
            "time score has {} points, frequency score {}",
            time.len(),
            freq.len()
        )));
    }
    Ok(time.iter().zip(freq).map(|(t, f)| t + score_lambda * f).collect())
}

/// Flags points strictly above the nearest-rank `(1 - ratio)` quantile.
pub fn apply_threshold(scores: &[f64], ratio: f64) -> Vec<u8> {
    if scores.is_empty() {
        return Vec::new();
    }
    let threshold = nearest_rank_quantile(scores, 1.0 - ratio);
    scores.iter().map(|&s| u8::from(s > threshold)).collect()
}

/// Smallest value with at least `q * n` values at or below it.
pub fn nearest_rank_quantile(scores: &[f64], q: f64) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // Tolerance keeps products like 0.9 * 10 from rounding up a rank.
    let rank = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

/// Scores every timestamp of `series`. Windows of length `T` are taken at
/// stride `T`, with a final window anchored at the end; where that window
/// overlaps its predecessor, its values win.
pub fn score_series(
    params: &ModelParams,
    series: &LabeledSeries,
    model_cfg: &ModelConfig,
    score_cfg: &ScoreConfig,
) -> Result<ScoreSeries> {
    score_cfg.validate(model_cfg.window)?;
    if series.channels() != model_cfg.channels {
        return Err(CatchError::Shape(format!(
            "model expects {} channels, found {}",
            model_cfg.channels,
            series.channels()
        )));
    }
    let t = model_cfg.window;
    let windows = seriesio::make_windows(series, t, t)?;
    let per_window: Vec<Result<(usize, Vec<f64>, Vec<f64>)>> = windows
        .par_iter()
        .map(|w| {
            let norm = seriesio::instance_normalize(w);
            let out = model::reconstruct(norm.values.view(), params, model_cfg)?;
            let x = norm.values.view();
            let r = out.recon_time.view();
            let time = time_score(x, r)?;
            let freq = match score_cfg.mode {
                ScoreMode::Point => frequency_point_score_strided(
                    x,
                    r,
                    score_cfg.inference_patch_size,
                    score_cfg.inference_patch_stride,
                )?,
                ScoreMode::Window => frequency_window_score(x, r)?,
            };
            Ok((w.origin_index, time, freq))
        })
        .collect();

    let len = series.len();
    let mut time = vec![0.0; len];
    let mut freq = vec![0.0; len];
    for part in per_window {
        let (origin, ts, fs) = part?;
        time[origin..origin + t].copy_from_slice(&ts);
        freq[origin..origin + t].copy_from_slice(&fs);
    }
    let final_score = combine_scores(&time, &freq, score_cfg.score_lambda)?;
    let predictions = apply_threshold(&final_score, score_cfg.threshold_ratio);
    Ok(ScoreSeries {
        time_score: time,
        freq_score: freq,
        final_score,
        predictions: Some(predictions),
        labels: series.labels.clone(),
    })
}
