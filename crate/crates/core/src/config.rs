//! Flat `key=value` run configuration. Blank lines and `#` comments are
//! ignored; unknown keys are errors.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CatchError, Result};
use crate::model::ModelConfig;
use crate::scoring::ScoreConfig;
use crate::trainer::TrainConfig;

/// Model, training and scoring settings for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Fixed channel count; inferred from the data when `None`.
    pub channels: Option<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            channels: None,
            model: ModelConfig::new(1, 96),
            train: TrainConfig::default(),
            score: ScoreConfig::default(),
        }
    }
}

pub const MODEL_KEYS: [&str; 10] = [
    "channels",
    "window",
    "patch_size",
    "patch_stride",
    "hidden",
    "heads",
    "layers",
    "ffn_hidden",
    "tau",
    "dropout",
];

pub const TRAIN_KEYS: [&str; 15] = [
    "eta_model",
    "eta_mask",
    "outer_steps",
    "inner_steps",
    "batch_size",
    "epochs",
    "seed",
    "lambda_rec_time",
    "lambda_rec_freq",
    "lambda_clustering",
    "lambda_regular",
    "beta1",
    "beta2",
    "epsilon",
    "window_stride",
];

pub const SCORE_KEYS: [&str; 5] = [
    "inference_patch_size",
    "inference_patch_stride",
    "score_lambda",
    "threshold_ratio",
    "score_mode",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CatchError::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

/// Splits config text into `(line number, key, value)` triples.
fn entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CatchError::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn set_model(m: &mut ModelConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "channels" => m.channels = parse_value(key, value)?,
        "window" => m.window = parse_value(key, value)?,
        "patch_size" => m.patch_size = parse_value(key, value)?,
        "patch_stride" => m.patch_stride = parse_value(key, value)?,
        "hidden" => m.hidden = parse_value(key, value)?,
        "heads" => m.heads = parse_value(key, value)?,
        "layers" => m.layers = parse_value(key, value)?,
        "ffn_hidden" => m.ffn_hidden = parse_value(key, value)?,
        "tau" => m.tau = parse_value(key, value)?,
        "dropout" => m.dropout = parse_value(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (line, key, value) in entries(text)? {
            cfg.set(&key, &value)
                .map_err(|e| CatchError::Config(format!("line {line}: {}", strip_prefix(e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CatchError::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key. `tau` drives both the mask sampling temperature and the
    /// clustering temperature.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "channels" => self.channels = Some(parse_value(key, value)?),
            "tau" => {
                let tau: f64 = parse_value(key, value)?;
                self.model.tau = tau;
                t.weights.tau = tau;
            }
            "eta_model" => t.eta_model = parse_value(key, value)?,
            "eta_mask" => t.eta_mask = parse_value(key, value)?,
            "outer_steps" => {
                t.outer_steps = if value == "auto" { None } else { Some(parse_value(key, value)?) }
            }
            "inner_steps" => t.inner_steps = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "epochs" => t.epochs = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "lambda_rec_time" => t.weights.rec_time = parse_value(key, value)?,
            "lambda_rec_freq" => t.weights.rec_freq = parse_value(key, value)?,
            "lambda_clustering" => t.weights.clustering = parse_value(key, value)?,
            "lambda_regular" => t.weights.regular = parse_value(key, value)?,
            "beta1" => t.beta1 = parse_value(key, value)?,
            "beta2" => t.beta2 = parse_value(key, value)?,
            "epsilon" => t.epsilon = parse_value(key, value)?,
            "window_stride" => t.window_stride = parse_value(key, value)?,
            "inference_patch_size" => self.score.inference_patch_size = parse_value(key, value)?,
            "inference_patch_stride" => self.score.inference_patch_stride = parse_value(key, value)?,
            "score_lambda" => self.score.score_lambda = parse_value(key, value)?,
            "threshold_ratio" => self.score.threshold_ratio = parse_value(key, value)?,
            "score_mode" => self.score.mode = value.parse()?,
            _ => {
                if !set_model(&mut self.model, key, value)? {
                    return Err(CatchError::Config(format!("unknown config key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Model settings for data with `channels` channels.
    pub fn model_for(&self, channels: usize) -> Result<ModelConfig> {
        if let Some(fixed) = self.channels {
            if fixed != channels {
                return Err(CatchError::Shape(format!(
                    "config fixes {fixed} channels but the data has {channels}"
                )));
            }
        }
        let m = ModelConfig {
            channels,
            ..self.model.clone()
        };
        m.validate()?;
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let s = &self.score;
        let mut out = String::new();
        if let Some(c) = self.channels {
            out.push_str(&format!("channels={c}\n"));
        }
        for line in model_to_text(&self.model).lines().skip(1) {
            out.push_str(line);
            out.push('\n');
        }
        let outer = t.outer_steps.map_or_else(|| "auto".to_string(), |n| n.to_string());
        let pairs: [(&str, String); 20] = [
            ("eta_model", t.eta_model.to_string()),
            ("eta_mask", t.eta_mask.to_string()),
            ("outer_steps", outer),
            ("inner_steps", t.inner_steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("seed", t.seed.to_string()),
            ("lambda_rec_time", t.weights.rec_time.to_string()),
            ("lambda_rec_freq", t.weights.rec_freq.to_string()),
            ("lambda_clustering", t.weights.clustering.to_string()),
            ("lambda_regular", t.weights.regular.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("epsilon", t.epsilon.to_string()),
            ("window_stride", t.window_stride.to_string()),
            ("inference_patch_size", s.inference_patch_size.to_string()),
            ("inference_patch_stride", s.inference_patch_stride.to_string()),
            ("score_lambda", s.score_lambda.to_string()),
            ("threshold_ratio", s.threshold_ratio.to_string()),
            ("score_mode", s.mode.as_str().to_string()),
        ];
        for (k, v) in pairs {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}

fn strip_prefix(e: CatchError) -> String {
    match e {
        CatchError::Config(m) => m,
        other => other.to_string(),
    }
}

/// Model settings as `key=value` lines, channels first.
pub fn model_to_text(m: &ModelConfig) -> String {
    format!(
        "channels={}\nwindow={}\npatch_size={}\npatch_stride={}\nhidden={}\nheads={}\nlayers={}\nffn_hidden={}\ntau={}\ndropout={}\n",
        m.channels, m.window, m.patch_size, m.patch_stride, m.hidden, m.heads, m.layers, m.ffn_hidden, m.tau, m.dropout
    )
}

/// Inverse of [`model_to_text`]; every model key must be present.
pub fn model_from_text(text: &str) -> Result<ModelConfig> {
    let mut m = ModelConfig::new(0, 0);
    let mut seen = Vec::new();
    for (line, key, value) in entries(text)? {
        if !set_model(&mut m, &key, &value)? {
            return Err(CatchError::Config(format!("line {line}: unknown model key `{key}`")));
        }
        seen.push(key);
    }
    if let Some(missing) = MODEL_KEYS.iter().find(|k| !seen.iter().any(|s| s == *k)) {
        return Err(CatchError::Config(format!("model config is missing `{missing}`")));
    }
    m.validate()?;
    Ok(m)
}
