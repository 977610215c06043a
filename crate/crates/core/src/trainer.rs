//! Bi-level training: each outer iteration takes one Adam step on the mask
//! generator, then `inner_steps` Adam steps on every other parameter. Every
//! step consumes a fresh mini-batch from a seeded, endlessly reshuffled
//! stream of windows.

use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{CatchError, Result};
use crate::model::{self, ModelConfig, ModelParams, Mode, OutputGrads, ParamGroup};
use crate::objectives::{self, LossComponents, LossWeights};
use crate::seriesio::{self, LabeledSeries, TimeWindow};
use crate::spectral;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eta_model: f64,
    pub eta_mask: f64,
    /// Explicit outer iteration count; derived from `epochs` when `None`.
    pub outer_steps: Option<usize>,
    pub inner_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Stride between training windows cut from the train split.
    pub window_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta_model: 1e-3,
            eta_mask: 1e-3,
            outer_steps: None,
            inner_steps: 3,
            batch_size: 32,
            epochs: 1,
            seed: 0,
            weights: LossWeights::default(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            window_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CatchError::Config(m));
        if !(self.eta_model >= 0.0) || !(self.eta_mask >= 0.0) {
            return fail(format!(
                "learning rates must be >= 0, got {} and {}",
                self.eta_model, self.eta_mask
            ));
        }
        if self.outer_steps == Some(0) {
            return fail("outer_steps must be >= 1".into());
        }
        if self.inner_steps == 0 {
            return fail("inner_steps must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.window_stride == 0 {
            return fail("window_stride must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!("Adam decay rates must be in [0, 1): {} {}", self.beta1, self.beta2));
        }
        if !(self.epsilon > 0.0) {
            return fail(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        self.weights.validate()
    }

    /// Outer iterations for a dataset of `windows` windows.
    pub fn resolved_outer_steps(&self, windows: usize) -> usize {
        if let Some(n) = self.outer_steps {
            return n;
        }
        let per_epoch = windows.div_ceil(self.batch_size);
        (self.epochs * per_epoch).div_ceil(1 + self.inner_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Mask,
    Model,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Mask => "mask",
            Phase::Model => "model",
        }
    }

    fn group(self) -> ParamGroup {
        match self {
            Phase::Mask => ParamGroup::Mask,
            Phase::Model => ParamGroup::Model,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based global step.
    pub step: usize,
    pub outer: usize,
    /// 0 for the mask step, `1..=inner_steps` for model steps.
    pub inner: usize,
    pub phase: Phase,
    pub components: LossComponents,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub duration: Duration,
}

/// Names of the tensors in each update group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub mask: Vec<String>,
    pub model: Vec<String>,
}

pub fn partition_params(params: &ModelParams) -> Partition {
    let (mask, model) = params
        .tensors()
        .into_iter()
        .map(|(name, _)| name)
        .partition(|name| ModelParams::group_of(name) == ParamGroup::Mask);
    Partition { mask, model }
}

/// Adaptive-moment optimizer with a separate step counter per group.
#[derive(Debug, Clone)]
pub struct Adam {
    first: ModelParams,
    second: ModelParams,
    steps: [i32; 2],
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(params: &ModelParams, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: [0, 0],
            beta1,
            beta2,
            epsilon,
        }
    }

    /// Updates only the tensors in `group`.
    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams, group: ParamGroup, lr: f64) {
        let slot = match group {
            ParamGroup::Mask => 0,
            ParamGroup::Model => 1,
        };
        self.steps[slot] += 1;
        let t = self.steps[slot];
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.first.tensors_mut())
            .zip(self.second.tensors_mut());
        for ((((name, mut p), (_, g)), (_, mut m)), (_, mut v)) in tensors {
            if ModelParams::group_of(&name) != group {
                continue;
            }
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Normalized training windows over the whole series.
pub fn training_windows(series: &LabeledSeries, window: usize, stride: usize) -> Result<Vec<TimeWindow>> {
    Ok(seriesio::make_windows(series, window, stride)?
        .iter()
        .map(seriesio::instance_normalize)
        .collect())
}

/// Loss components of one normalized window, without gradients.
pub fn window_loss<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    params: &ModelParams,
    cfg: &ModelConfig,
    weights: &LossWeights,
    mode: Mode,
    rng: &mut R,
) -> Result<LossComponents> {
    evaluate(x, params, cfg, weights, mode, rng, false).map(|(c, _)| c)
}

/// Loss components of one normalized window and the gradient of the weighted
/// total with respect to every parameter.
pub fn window_loss_and_grad<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    params: &ModelParams,
    cfg: &ModelConfig,
    weights: &LossWeights,
    mode: Mode,
    rng: &mut R,
) -> Result<(LossComponents, ModelParams)> {
    evaluate(x, params, cfg, weights, mode, rng, true).map(|(c, g)| (c, g.expect("gradient requested")))
}

fn evaluate<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    params: &ModelParams,
    cfg: &ModelConfig,
    weights: &LossWeights,
    mode: Mode,
    rng: &mut R,
    with_grad: bool,
) -> Result<(LossComponents, Option<ModelParams>)> {
    let (out, cache) = model::forward_cached(x, params, cfg, mode, Some(rng))?;
    let (real, imag) = (cache.real.view(), cache.imag.view());
    let (rr, ri) = (out.recon_real.view(), out.recon_imag.view());
    let mut c = LossComponents {
        rec_time: objectives::rec_loss_time(x, out.recon_time.view())?,
        rec_freq: objectives::rec_loss_freq(real, imag, rr, ri)?,
        ..Default::default()
    };

    let patches = cache.patches.len();
    let maps = patches * cfg.layers * cfg.heads;
    let cluster_scale = if maps > 0 { weights.clustering / maps as f64 } else { 0.0 };
    let regular_scale = weights.regular / patches as f64;
    let mut raw_grads = Vec::with_capacity(patches);
    let mut mask_grads = Vec::with_capacity(patches);
    for patch in &cache.patches {
        let mask = patch.mask.view();
        let mut d_mask = Array2::zeros(mask.dim());
        let mut per_layer = Vec::with_capacity(patch.layers.len());
        for layer in &patch.layers {
            let mut per_head = Vec::with_capacity(cfg.heads);
            for raw in &layer.attention.raw {
                let (value, d_raw, d_m) = objectives::clustering_loss_grad(raw.view(), mask, weights.tau);
                c.clustering += value;
                per_head.push(d_raw * cluster_scale);
                d_mask.scaled_add(cluster_scale, &d_m);
            }
            per_layer.push(per_head);
        }
        c.regular += objectives::regular_loss(mask);
        d_mask.scaled_add(regular_scale, &objectives::regular_loss_grad(mask));
        raw_grads.push(per_layer);
        mask_grads.push(d_mask);
    }
    if maps > 0 {
        c.clustering /= maps as f64;
    }
    c.regular /= patches as f64;
    objectives::total_loss(&c, weights)?;
    if !with_grad {
        return Ok((c, None));
    }

    let d_time = objectives::rec_loss_time_grad(x, out.recon_time.view()) * weights.rec_time;
    let (mut d_real, mut d_imag) = objectives::rec_loss_freq_grad(real, imag, rr, ri);
    d_real *= weights.rec_freq;
    d_imag *= weights.rec_freq;
    let (t_real, t_imag) = spectral::irfft_adjoint(d_time.view());
    d_real += &t_real;
    d_imag += &t_imag;

    let grads = OutputGrads {
        real: d_real,
        imag: d_imag,
        raw_scores: Some(raw_grads),
        masks: Some(mask_grads),
    };
    let mut grad = params.zeros_like();
    model::backward(&cache, params, cfg, &grads, &mut grad);
    Ok((c, Some(grad)))
}

/// Indices from an endless sequence of shuffled passes over the data.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    fn new(len: usize, rng: ChaCha8Rng) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            pos: len,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Mean loss and gradient over a batch. Per-window randomness comes from
/// seeds drawn in batch order, so the result does not depend on thread
/// scheduling.
fn batch_loss_and_grad(
    data: &[TimeWindow],
    batch: &[usize],
    params: &ModelParams,
    cfg: &ModelConfig,
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<(LossComponents, ModelParams)> {
    let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
    let parts: Vec<Result<(LossComponents, ModelParams)>> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(&i, &seed)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            window_loss_and_grad(data[i].values.view(), params, cfg, weights, Mode::Train, &mut r)
        })
        .collect();
    let mut total = LossComponents::default();
    let mut grad = params.zeros_like();
    for part in parts {
        let (c, g) = part?;
        total.add(&c);
        grad.add_assign(&g);
    }
    let k = 1.0 / batch.len() as f64;
    grad.scale(k);
    Ok((total.scaled(k), grad))
}

/// Runs the alternating schedule and returns the trained parameters with the
/// per-step loss history.
pub fn bilevel_train(
    data: &[TimeWindow],
    params: ModelParams,
    cfg: &ModelConfig,
    train: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    bilevel_train_observed(data, params, cfg, train, |_, _| {})
}

/// [`bilevel_train`] calling `observe` after every optimizer step with the
/// step's record and the updated parameters.
pub fn bilevel_train_observed(
    data: &[TimeWindow],
    params: ModelParams,
    cfg: &ModelConfig,
    train: &TrainConfig,
    mut observe: impl FnMut(&StepRecord, &ModelParams),
) -> Result<(ModelParams, TrainReport)> {
    train.validate()?;
    cfg.validate()?;
    params.check_shapes(cfg)?;
    if data.is_empty() {
        return Err(CatchError::Shape("no training windows".into()));
    }
    if let Some(w) = data.iter().find(|w| w.values.dim() != (cfg.channels, cfg.window)) {
        return Err(CatchError::Shape(format!(
            "training window at {} is {:?}, model expects ({}, {})",
            w.origin_index,
            w.values.dim(),
            cfg.channels,
            cfg.window
        )));
    }

    let started = Instant::now();
    let mut params = params;
    let mut adam = Adam::new(&params, train.beta1, train.beta2, train.epsilon);
    let mut seeder = ChaCha8Rng::seed_from_u64(train.seed);
    let mut stream = BatchStream::new(data.len(), ChaCha8Rng::seed_from_u64(seeder.random()));
    let mut noise = ChaCha8Rng::seed_from_u64(seeder.random());
    let batch_size = train.batch_size.min(data.len());
    let outer_steps = train.resolved_outer_steps(data.len());
    let mut records = Vec::with_capacity(outer_steps * (1 + train.inner_steps));

    for outer in 1..=outer_steps {
        for inner in 0..=train.inner_steps {
            let (phase, lr) = if inner == 0 {
                (Phase::Mask, train.eta_mask)
            } else {
                (Phase::Model, train.eta_model)
            };
            let step = records.len() + 1;
            let batch = stream.next_batch(batch_size);
            let (components, grad) = batch_loss_and_grad(data, &batch, &params, cfg, &train.weights, &mut noise)
                .map_err(|e| match e {
                    CatchError::NonFinite(m) => {
                        CatchError::NonFinite(format!("step {step} ({} phase): {m}", phase.as_str()))
                    }
                    other => other,
                })?;
            let total = objectives::total_loss(&components, &train.weights)?;
            adam.step(&mut params, &grad, phase.group(), lr);
            if !params.is_finite() {
                return Err(CatchError::NonFinite(format!(
                    "parameters became non-finite after step {step} ({} phase)",
                    phase.as_str()
                )));
            }
            records.push(StepRecord {
                step,
                outer,
                inner,
                phase,
                components,
                total,
            });
            observe(records.last().unwrap(), &params);
        }
    }
    Ok((
        params,
        TrainReport {
            records,
            duration: started.elapsed(),
        },
    ))
}

/// Writes the loss history as `step,phase,rec_time,rec_freq,clustering,regular,total`.
pub fn write_loss_csv(report: &TrainReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "phase", "rec_time", "rec_freq", "clustering", "regular", "total"])?;
    for r in &report.records {
        let c = &r.components;
        w.write_record([
            r.step.to_string(),
            r.phase.as_str().to_string(),
            c.rec_time.to_string(),
            c.rec_freq.to_string(),
            c.clustering.to_string(),
            c.regular.to_string(),
            r.total.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CatchError::io(path, e))
}
