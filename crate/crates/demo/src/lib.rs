//! Browser demo: synthetic data preview, point-score explorer and mask sampler.
//!
//! The `*_data` functions are plain Rust; the exported wrappers only convert
//! errors for JavaScript.

use catch_core::model::{self, ModelConfig, ModelParams, Mode};
use catch_core::scoring;
use catch_core::synthgen::{self, AnomalyType, SynthConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const MAX_LENGTH: usize = 20_000;

fn synth_config(seed: u64, length: usize) -> Result<SynthConfig, String> {
    if !(16..=MAX_LENGTH).contains(&length) {
        return Err(format!("length must be in 16..={MAX_LENGTH}, got {length}"));
    }
    Ok(SynthConfig {
        seed,
        train_length: length,
        test_length: length,
        ..Default::default()
    })
}

/// Clean and injected test splits, drawn the way `synthesize_with` draws them.
fn clean_and_injected(kind: &str, seed: u64, length: usize) -> Result<(Array2<f64>, Array2<f64>, Vec<u8>), String> {
    let kind: AnomalyType = kind.parse().map_err(|e: catch_core::error::CatchError| e.to_string())?;
    let cfg = synth_config(seed, length)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    synthgen::generate_base(&cfg, cfg.train_length, &mut rng);
    let clean = synthgen::generate_base(&cfg, cfg.test_length, &mut rng);
    let mut dirty = clean.clone();
    let mut labels = vec![0u8; length];
    for channel in 0..cfg.dims() {
        for spec in kind.injections() {
            let l = synthgen::inject(&mut dirty, channel, &spec, &cfg, &mut rng).map_err(|e| e.to_string())?;
            labels.iter_mut().zip(l).for_each(|(a, b)| *a |= b);
        }
    }
    Ok((clean, dirty, labels))
}

#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct Preview {
    channels: usize,
    length: usize,
    values: Vec<f64>,
    labels: Vec<u8>,
}

#[wasm_bindgen]
impl Preview {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    /// Row-major `channels × length`.
    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.labels.clone()
    }
}

pub fn preview_data(kind: &str, seed: u64, length: usize) -> Result<Preview, String> {
    let (_, dirty, labels) = clean_and_injected(kind, seed, length)?;
    Ok(Preview {
        channels: dirty.nrows(),
        length,
        values: dirty.iter().cloned().collect(),
        labels,
    })
}

#[wasm_bindgen]
pub fn preview(kind: &str, seed: u64, length: usize) -> Result<Preview, JsError> {
    preview_data(kind, seed, length).map_err(|e| JsError::new(&e))
}

/// Scores of an injected series against its own clean version, standing in
/// for a perfect reconstruction.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct ScoreView {
    signal: Vec<f64>,
    clean: Vec<f64>,
    time: Vec<f64>,
    freq: Vec<f64>,
    combined: Vec<f64>,
    labels: Vec<u8>,
}

#[wasm_bindgen]
impl ScoreView {
    /// First channel, with anomalies.
    pub fn signal(&self) -> Vec<f64> {
        self.signal.clone()
    }

    pub fn clean(&self) -> Vec<f64> {
        self.clean.clone()
    }

    pub fn time(&self) -> Vec<f64> {
        self.time.clone()
    }

    pub fn freq(&self) -> Vec<f64> {
        self.freq.clone()
    }

    pub fn combined(&self) -> Vec<f64> {
        self.combined.clone()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.labels.clone()
    }
}

pub fn explore_scores_data(kind: &str, seed: u64, length: usize, patch: usize, lambda: f64) -> Result<ScoreView, String> {
    let (clean, dirty, labels) = clean_and_injected(kind, seed, length)?;
    if patch == 0 || patch > length {
        return Err(format!("patch size must be in 1..={length}, got {patch}"));
    }
    let time = scoring::time_score(dirty.view(), clean.view()).map_err(|e| e.to_string())?;
    let freq = scoring::frequency_point_score(dirty.view(), clean.view(), patch).map_err(|e| e.to_string())?;
    let combined = scoring::combine_scores(&time, &freq, lambda).map_err(|e| e.to_string())?;
    Ok(ScoreView {
        signal: dirty.row(0).to_vec(),
        clean: clean.row(0).to_vec(),
        time,
        freq,
        combined,
        labels,
    })
}

#[wasm_bindgen]
pub fn explore_scores(kind: &str, seed: u64, length: usize, patch: usize, lambda: f64) -> Result<ScoreView, JsError> {
    explore_scores_data(kind, seed, length, patch, lambda).map_err(|e| JsError::new(&e))
}

/// Mask probabilities for one random band next to how often each entry was
/// kept over repeated training-mode draws.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct MaskStats {
    channels: usize,
    probability: Vec<f64>,
    frequency: Vec<f64>,
    eval_mask: Vec<f64>,
}

#[wasm_bindgen]
impl MaskStats {
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Row-major `channels × channels`.
    pub fn probability(&self) -> Vec<f64> {
        self.probability.clone()
    }

    pub fn frequency(&self) -> Vec<f64> {
        self.frequency.clone()
    }

    pub fn eval_mask(&self) -> Vec<f64> {
        self.eval_mask.clone()
    }
}

pub fn sample_masks_data(channels: usize, tau: f64, spread: f64, seed: u64, draws: usize) -> Result<MaskStats, String> {
    if !(1..=16).contains(&channels) {
        return Err(format!("channels must be in 1..=16, got {channels}"));
    }
    if !(tau > 0.0) || !spread.is_finite() || draws == 0 {
        return Err("tau must be > 0, spread finite and draws >= 1".into());
    }
    let cfg = ModelConfig {
        hidden: 8,
        heads: 2,
        ..ModelConfig::new(channels, 48)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(&cfg, &mut rng);
    let hidden = Array2::from_shape_fn((channels, cfg.hidden), |_| spread * rng.random_range(-1.0..1.0));
    let (prob, eval) = model::generate_mask::<ChaCha8Rng>(hidden.view(), &params, tau, Mode::Eval, None, 0);
    let mut counts = Array2::<f64>::zeros((channels, channels));
    for _ in 0..draws {
        let (_, m) = model::generate_mask(hidden.view(), &params, tau, Mode::Train, Some(&mut rng), 0);
        counts += &m.values;
    }
    counts /= draws as f64;
    Ok(MaskStats {
        channels,
        probability: prob.values.iter().cloned().collect(),
        frequency: counts.iter().cloned().collect(),
        eval_mask: eval.values.iter().cloned().collect(),
    })
}

#[wasm_bindgen]
pub fn sample_masks(channels: usize, tau: f64, spread: f64, seed: u64, draws: usize) -> Result<MaskStats, JsError> {
    sample_masks_data(channels, tau, spread, seed, draws).map_err(|e| JsError::new(&e))
}
