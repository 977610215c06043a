//! The reconstruction network.
//!
//! A normalized window is moved to the frequency domain and cut into bands.
//! Each band (real and imaginary bins side by side) is projected to a hidden
//! `[N x d]` token matrix. A mask generator turns every band's tokens into an
//! `N x N` channel mask, and a stack of channel-masked transformer layers
//! mixes information only between channels the mask connects. The per-band
//! outputs are flattened and mapped back to the full real and imaginary
//! spectra by two linear heads, and an inverse FFT yields the time-domain
//! reconstruction.
//!
//! Every stage has a hand-written backward pass; [`forward_cached`] records
//! what [`backward`] needs.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::error::{CatchError, Result};
use crate::nn::{self, channel_layernorm, channel_layernorm_backward, gelu, gelu_grad, sigmoid, Linear};
use crate::seriesio::TimeWindow;
use crate::spectral::{self, FrequencyPatch};

/// Stand-in for `-inf` in masked attention scores.
pub const MASK_SENTINEL: f64 = -1e9;

/// Clamp for `exp` of masked-out scores, which may exceed every kept score.
const MAX_EXP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub window: usize,
    /// Width of a frequency band, in bins.
    pub patch_size: usize,
    pub patch_stride: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(channels: usize, window: usize) -> Self {
        Self {
            channels,
            window,
            patch_size: 24,
            patch_stride: 24,
            hidden: 64,
            heads: 4,
            layers: 2,
            ffn_hidden: 128,
            tau: 1.0,
            dropout: 0.1,
        }
    }

    pub fn bins(&self) -> usize {
        spectral::bins(self.window)
    }

    pub fn patch_count(&self) -> usize {
        (self.bins() - self.patch_size) / self.patch_stride + 1
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CatchError::Config(m));
        if self.channels == 0 {
            return fail("channels must be >= 1".into());
        }
        if self.window < 2 {
            return fail(format!("window {} < 2", self.window));
        }
        if self.patch_size == 0 || self.patch_size > self.bins() {
            return fail(format!(
                "patch_size {} must be in 1..={} for window {}",
                self.patch_size,
                self.bins(),
                self.window
            ));
        }
        if self.patch_stride == 0 {
            return fail("patch_stride must be >= 1".into());
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.ffn_hidden == 0 {
            return fail("ffn_hidden must be >= 1".into());
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau must be > 0, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// How channel masks are drawn from the probability matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Hard Gumbel-Softmax samples with straight-through gradients; dropout on.
    Train,
    /// Deterministic `D >= 0.5` masks; dropout off.
    Eval,
    /// The soft Gumbel-Softmax relaxation itself, without hardening. Smooth in
    /// every parameter, which makes it the reference for gradient checks.
    Relaxed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub output: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmtLayerParams {
    pub attention: AttentionParams,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Mask generator weights, updated in the outer step.
    Mask,
    /// Everything else, updated in the inner steps.
    Model,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub patch_projection: Linear,
    pub mask_generator: Linear,
    pub layers: Vec<CmtLayerParams>,
    pub head_real: Linear,
    pub head_imag: Linear,
}

macro_rules! tensor_list {
    ($p:expr, $view:ident, $iter:ident) => {{
        let mut out = Vec::new();
        out.push(("patch_projection.weight".to_string(), $p.patch_projection.weight.$view().into_dyn()));
        out.push(("patch_projection.bias".to_string(), $p.patch_projection.bias.$view().into_dyn()));
        out.push(("mask_generator.weight".to_string(), $p.mask_generator.weight.$view().into_dyn()));
        out.push(("mask_generator.bias".to_string(), $p.mask_generator.bias.$view().into_dyn()));
        for (i, layer) in $p.layers.$iter().enumerate() {
            let a = &format!("layers.{i}.attention");
            out.push((format!("{a}.query"), layer.attention.query.$view().into_dyn()));
            out.push((format!("{a}.key"), layer.attention.key.$view().into_dyn()));
            out.push((format!("{a}.value"), layer.attention.value.$view().into_dyn()));
            out.push((format!("{a}.output.weight"), layer.attention.output.weight.$view().into_dyn()));
            out.push((format!("{a}.output.bias"), layer.attention.output.bias.$view().into_dyn()));
            out.push((format!("layers.{i}.ff_in.weight"), layer.ff_in.weight.$view().into_dyn()));
            out.push((format!("layers.{i}.ff_in.bias"), layer.ff_in.bias.$view().into_dyn()));
            out.push((format!("layers.{i}.ff_out.weight"), layer.ff_out.weight.$view().into_dyn()));
            out.push((format!("layers.{i}.ff_out.bias"), layer.ff_out.bias.$view().into_dyn()));
        }
        out.push(("head_real.weight".to_string(), $p.head_real.weight.$view().into_dyn()));
        out.push(("head_real.bias".to_string(), $p.head_real.bias.$view().into_dyn()));
        out.push(("head_imag.weight".to_string(), $p.head_imag.weight.$view().into_dyn()));
        out.push(("head_imag.bias".to_string(), $p.head_imag.bias.$view().into_dyn()));
        out
    }};
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.hidden;
        let bound = 1.0 / (d as f64).sqrt();
        let flat = cfg.patch_count() * d;
        Self {
            patch_projection: Linear::init(2 * cfg.patch_size, d, rng),
            mask_generator: Linear::init(d, cfg.channels, rng),
            layers: (0..cfg.layers)
                .map(|_| CmtLayerParams {
                    attention: AttentionParams {
                        query: nn::uniform_matrix(d, d, bound, rng),
                        key: nn::uniform_matrix(d, d, bound, rng),
                        value: nn::uniform_matrix(d, d, bound, rng),
                        output: Linear::init(d, d, rng),
                    },
                    ff_in: Linear::init(d, cfg.ffn_hidden, rng),
                    ff_out: Linear::init(cfg.ffn_hidden, d, rng),
                })
                .collect(),
            head_real: Linear::init(flat, cfg.bins(), rng),
            head_imag: Linear::init(flat, cfg.bins(), rng),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        let flat = cfg.patch_count() * d;
        Self {
            patch_projection: Linear::zeros(2 * cfg.patch_size, d),
            mask_generator: Linear::zeros(d, cfg.channels),
            layers: (0..cfg.layers)
                .map(|_| CmtLayerParams {
                    attention: AttentionParams {
                        query: Array2::zeros((d, d)),
                        key: Array2::zeros((d, d)),
                        value: Array2::zeros((d, d)),
                        output: Linear::zeros(d, d),
                    },
                    ff_in: Linear::zeros(d, cfg.ffn_hidden),
                    ff_out: Linear::zeros(cfg.ffn_hidden, d),
                })
                .collect(),
            head_real: Linear::zeros(flat, cfg.bins()),
            head_imag: Linear::zeros(flat, cfg.bins()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// Named views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        tensor_list!(self, view, iter)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        tensor_list!(self, view_mut, iter_mut)
    }

    pub fn group_of(name: &str) -> ParamGroup {
        if name.starts_with("mask_generator.") {
            ParamGroup::Mask
        } else {
            ParamGroup::Model
        }
    }

    pub fn fill(&mut self, value: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(value);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * k);
        }
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let want = ModelParams::zeros(cfg);
        let got = self.tensors();
        let expected = want.tensors();
        if got.len() != expected.len() {
            return Err(CatchError::Shape(format!(
                "{} parameter tensors, config implies {}",
                got.len(),
                expected.len()
            )));
        }
        for ((name, a), (_, b)) in got.iter().zip(&expected) {
            if a.shape() != b.shape() {
                return Err(CatchError::Shape(format!(
                    "{name}: shape {:?}, config implies {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    pub values: Array2<f64>,
    pub patch_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMask {
    pub values: Array2<f64>,
    pub patch_index: usize,
}

/// Raw `Q K^T` scores and their masked counterparts, one matrix per head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub raw_scores: Vec<Array2<f64>>,
    pub masked_scores: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchTrace {
    pub probability: ProbabilityMatrix,
    pub mask: ChannelMask,
    /// One trace per transformer layer.
    pub attention: Vec<AttentionTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub recon_real: Array2<f64>,
    pub recon_imag: Array2<f64>,
    pub recon_time: Array2<f64>,
    pub traces: Vec<PatchTrace>,
}

/// Applies the shared band projection to one frequency patch.
pub fn project_patch(patch: &FrequencyPatch, params: &ModelParams) -> Result<Array2<f64>> {
    let proj = &params.patch_projection;
    if patch.joint.ncols() != proj.input_dim() {
        return Err(CatchError::Shape(format!(
            "patch width {} but projection expects {}",
            patch.joint.ncols(),
            proj.input_dim()
        )));
    }
    Ok(proj.forward(patch.joint.view()))
}

pub(crate) struct MaskSample {
    pub probability: Array2<f64>,
    pub mask: Array2<f64>,
    /// `dM/dlogit` through the soft relaxation; `None` in eval mode.
    pub slope: Option<Array2<f64>>,
}

fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    u.max(f64::MIN_POSITIVE)
}

pub(crate) fn sample_mask<R: Rng + ?Sized>(
    hidden: ArrayView2<f64>,
    generator: &Linear,
    tau: f64,
    mode: Mode,
    rng: Option<&mut R>,
) -> MaskSample {
    let logits = generator.forward(hidden);
    let probability = logits.mapv(sigmoid);
    let n = logits.nrows();
    let (mut mask, mut slope) = match mode {
        Mode::Eval => (probability.mapv(|d| if d >= 0.5 { 1.0 } else { 0.0 }), None),
        Mode::Train | Mode::Relaxed => {
            let rng = rng.expect("training-mode mask sampling needs an rng");
            let mut mask = Array2::zeros((n, n));
            let mut slope = Array2::zeros((n, n));
            for ((ix, &logit), m) in logits.indexed_iter().zip(mask.iter_mut()) {
                // Difference of two Gumbel draws: keep vs drop.
                let g = -(-open_unit(rng).ln()).ln() + (-open_unit(rng).ln()).ln();
                let soft = sigmoid((logit + g) / tau);
                slope[ix] = soft * (1.0 - soft) / tau;
                *m = match mode {
                    Mode::Train => {
                        if soft >= 0.5 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    _ => soft,
                };
            }
            (mask, Some(slope))
        }
    };
    mask.diag_mut().fill(1.0);
    if let Some(s) = slope.as_mut() {
        s.diag_mut().fill(0.0);
    }
    MaskSample {
        probability,
        mask,
        slope,
    }
}

/// Draws the channel mask for one band. Training samples a hard binary
/// Gumbel-Softmax mask; evaluation thresholds the probabilities at 0.5. The
/// diagonal is always 1.
pub fn generate_mask<R: Rng + ?Sized>(
    hidden: ArrayView2<f64>,
    params: &ModelParams,
    tau: f64,
    mode: Mode,
    rng: Option<&mut R>,
    patch_index: usize,
) -> (ProbabilityMatrix, ChannelMask) {
    let sample = sample_mask(hidden, &params.mask_generator, tau, mode, rng);
    (
        ProbabilityMatrix {
            values: sample.probability,
            patch_index,
        },
        ChannelMask {
            values: sample.mask,
            patch_index,
        },
    )
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    pub raw: Vec<Array2<f64>>,
    weights: Vec<Array2<f64>>,
    /// `exp(a - max) / Z` for every entry, masked or not.
    relative: Vec<Array2<f64>>,
    /// Concatenated head outputs before the output projection.
    pub context: Array2<f64>,
    pub output: Array2<f64>,
}

impl AttentionCache {
    pub(crate) fn trace(&self, mask: ArrayView2<f64>) -> AttentionTrace {
        AttentionTrace {
            raw_scores: self.raw.clone(),
            masked_scores: self
                .raw
                .iter()
                .map(|r| {
                    Array2::from_shape_fn(r.dim(), |ix| if mask[ix] >= 0.5 { r[ix] } else { MASK_SENTINEL })
                })
                .collect(),
        }
    }
}

/// Multi-head attention across channels where query channel `l` only sees
/// key channels `m` with `mask[l, m] = 1`. Mask entries weight the softmax
/// numerators, so a binary mask matches sentinel masking and a soft mask
/// interpolates.
pub(crate) fn attention_forward(
    input: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    params: &AttentionParams,
    heads: usize,
) -> AttentionCache {
    let (n, d) = input.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = input.dot(&params.query);
    let k = input.dot(&params.key);
    let v = input.dot(&params.value);
    let mut context = Array2::zeros((n, d));
    let mut raw = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    let mut relative = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let t = q.slice(cols).dot(&k.slice(cols).t());
        let mut w = Array2::zeros((n, n));
        let mut rel = Array2::zeros((n, n));
        for l in 0..n {
            let max = (0..n)
                .filter(|&m| mask[[l, m]] > 0.0)
                .map(|m| t[[l, m]] * scale)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for m in 0..n {
                let e = (t[[l, m]] * scale - max).min(MAX_EXP).exp();
                rel[[l, m]] = e;
                z += mask[[l, m]] * e;
            }
            for m in 0..n {
                rel[[l, m]] /= z;
                w[[l, m]] = mask[[l, m]] * rel[[l, m]];
            }
        }
        context.slice_mut(cols).assign(&w.dot(&v.slice(cols)));
        raw.push(t);
        weights.push(w);
        relative.push(rel);
    }
    let output = params.output.forward(context.view());
    AttentionCache {
        input: input.to_owned(),
        q,
        k,
        v,
        raw,
        weights,
        relative,
        context,
        output,
    }
}

/// Backward of [`attention_forward`]. `extra_raw` adds gradients that other
/// objectives place directly on the per-head raw scores. Mask gradients are
/// accumulated into `d_mask`.
pub(crate) fn attention_backward(
    cache: &AttentionCache,
    params: &AttentionParams,
    heads: usize,
    d_out: ArrayView2<f64>,
    extra_raw: Option<&[Array2<f64>]>,
    grad: &mut AttentionParams,
    d_mask: &mut Array2<f64>,
) -> Array2<f64> {
    let (n, d) = cache.input.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let d_context = params.output.backward(cache.context.view(), d_out, &mut grad.output);
    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let w = &cache.weights[h];
        let dctx = d_context.slice(cols);
        let dw = dctx.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&w.t().dot(&dctx));
        let inner = (w * &dw).sum_axis(Axis(1)).insert_axis(Axis(1));
        let centered = &dw - &inner;
        let mut d_raw = w * &centered * scale;
        *d_mask += &(&cache.relative[h] * &centered);
        if let Some(extra) = extra_raw {
            d_raw += &extra[h];
        }
        dq.slice_mut(cols).assign(&d_raw.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&d_raw.t().dot(&cache.q.slice(cols)));
    }
    grad.query += &cache.input.t().dot(&dq);
    grad.key += &cache.input.t().dot(&dk);
    grad.value += &cache.input.t().dot(&dv);
    dq.dot(&params.query.t()) + dk.dot(&params.key.t()) + dv.dot(&params.value.t())
}

/// Masked multi-head attention; returns the output-projected result and the
/// score trace.
pub fn masked_attention(
    hidden: ArrayView2<f64>,
    mask: &ChannelMask,
    params: &AttentionParams,
    heads: usize,
) -> (Array2<f64>, AttentionTrace) {
    let cache = attention_forward(hidden, mask.values.view(), params, heads);
    let trace = cache.trace(mask.values.view());
    (cache.output, trace)
}

/// Concatenated per-head attention outputs before the output projection.
pub fn attention_context(
    hidden: ArrayView2<f64>,
    mask: &ChannelMask,
    params: &AttentionParams,
    heads: usize,
) -> Array2<f64> {
    attention_forward(hidden, mask.values.view(), params, heads).context
}

/// Gradients of a scalar with respect to an attention or layer input, its
/// mask, and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrads<P> {
    pub hidden: Array2<f64>,
    pub mask: Array2<f64>,
    pub params: P,
}

fn zero_attention(p: &AttentionParams) -> AttentionParams {
    AttentionParams {
        query: Array2::zeros(p.query.dim()),
        key: Array2::zeros(p.key.dim()),
        value: Array2::zeros(p.value.dim()),
        output: Linear::zeros(p.output.input_dim(), p.output.output_dim()),
    }
}

/// Backward of [`masked_attention`] for an upstream gradient `d_out`. The
/// mask may be soft; binary masks give the straight-through mask gradient.
pub fn masked_attention_backward(
    hidden: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    params: &AttentionParams,
    heads: usize,
    d_out: ArrayView2<f64>,
) -> InputGrads<AttentionParams> {
    let cache = attention_forward(hidden, mask, params, heads);
    let mut grad = zero_attention(params);
    let mut d_mask = Array2::zeros(mask.dim());
    let d_hidden = attention_backward(&cache, params, heads, d_out, None, &mut grad, &mut d_mask);
    InputGrads {
        hidden: d_hidden,
        mask: d_mask,
        params: grad,
    }
}

/// Inference-form layer output for a possibly soft mask.
pub fn cmt_layer_soft(hidden: ArrayView2<f64>, mask: ArrayView2<f64>, params: &CmtLayerParams, heads: usize) -> Array2<f64> {
    layer_forward::<rand_chacha::ChaCha8Rng>(hidden, mask, params, heads, 0.0, None).output
}

/// Backward of [`cmt_layer`] (no dropout) for an upstream gradient `d_out`.
pub fn cmt_layer_backward(
    hidden: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    params: &CmtLayerParams,
    heads: usize,
    d_out: ArrayView2<f64>,
) -> InputGrads<CmtLayerParams> {
    let cache = layer_forward::<rand_chacha::ChaCha8Rng>(hidden, mask, params, heads, 0.0, None);
    let mut grad = CmtLayerParams {
        attention: zero_attention(&params.attention),
        ff_in: Linear::zeros(params.ff_in.input_dim(), params.ff_in.output_dim()),
        ff_out: Linear::zeros(params.ff_out.input_dim(), params.ff_out.output_dim()),
    };
    let mut d_mask = Array2::zeros(mask.dim());
    let d_hidden = layer_backward(&cache, params, heads, d_out, None, &mut grad, &mut d_mask);
    InputGrads {
        hidden: d_hidden,
        mask: d_mask,
        params: grad,
    }
}

/// Soft relaxation of the training-mode mask for fixed Gumbel draws:
/// `sigmoid((hidden W + b + noise) / tau)` off the diagonal, 1 on it. The
/// straight-through estimator passes gradients through this map.
pub fn relaxed_mask(hidden: ArrayView2<f64>, generator: &Linear, noise: ArrayView2<f64>, tau: f64) -> Array2<f64> {
    let mut m = (generator.forward(hidden) + noise).mapv(|z| sigmoid(z / tau));
    m.diag_mut().fill(1.0);
    m
}

/// Gradient of `sum(d_mask * M)` through [`relaxed_mask`] with respect to
/// the generator weights and bias, plus the hidden input.
pub fn relaxed_mask_backward(
    hidden: ArrayView2<f64>,
    generator: &Linear,
    noise: ArrayView2<f64>,
    tau: f64,
    d_mask: ArrayView2<f64>,
) -> (Array2<f64>, Linear) {
    let mut slope = (generator.forward(hidden) + noise).mapv(|z| {
        let s = sigmoid(z / tau);
        s * (1.0 - s) / tau
    });
    slope.diag_mut().fill(0.0);
    let d_logits = &d_mask * &slope;
    let mut grad = Linear::zeros(generator.input_dim(), generator.output_dim());
    let d_hidden = generator.backward(hidden, d_logits.view(), &mut grad);
    (d_hidden, grad)
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    norm1: Array2<f64>,
    inv1: Array1<f64>,
    pub attention: AttentionCache,
    drop1: Option<Array2<f64>>,
    norm2: Array2<f64>,
    inv2: Array1<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    drop2: Option<Array2<f64>>,
    pub output: Array2<f64>,
}

fn dropout_mask<R: Rng + ?Sized>(shape: (usize, usize), rate: f64, rng: Option<&mut R>) -> Option<Array2<f64>> {
    if rate <= 0.0 {
        return None;
    }
    let rng = rng?;
    let keep = 1.0 / (1.0 - rate);
    Some(Array2::from_shape_fn(shape, |_| if rng.random::<f64>() < rate { 0.0 } else { keep }))
}

/// Pre-norm transformer layer over channels: masked attention then a GELU
/// feed-forward block, each wrapped in a residual connection.
pub(crate) fn layer_forward<R: Rng + ?Sized>(
    hidden: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    params: &CmtLayerParams,
    heads: usize,
    dropout: f64,
    mut rng: Option<&mut R>,
) -> LayerCache {
    let (norm1, inv1) = channel_layernorm(hidden);
    let attention = attention_forward(norm1.view(), mask, &params.attention, heads);
    let drop1 = dropout_mask(attention.output.dim(), dropout, rng.as_deref_mut());
    let mut mid = hidden.to_owned();
    match &drop1 {
        Some(m) => mid += &(&attention.output * m),
        None => mid += &attention.output,
    }
    let (norm2, inv2) = channel_layernorm(mid.view());
    let ff_pre = params.ff_in.forward(norm2.view());
    let ff_act = ff_pre.mapv(gelu);
    let ff_out = params.ff_out.forward(ff_act.view());
    let drop2 = dropout_mask(ff_out.dim(), dropout, rng.as_deref_mut());
    let output = match &drop2 {
        Some(m) => &mid + &(&ff_out * m),
        None => &mid + &ff_out,
    };
    LayerCache {
        norm1,
        inv1,
        attention,
        drop1,
        norm2,
        inv2,
        ff_pre,
        ff_act,
        drop2,
        output,
    }
}

pub(crate) fn layer_backward(
    cache: &LayerCache,
    params: &CmtLayerParams,
    heads: usize,
    d_out: ArrayView2<f64>,
    extra_raw: Option<&[Array2<f64>]>,
    grad: &mut CmtLayerParams,
    d_mask: &mut Array2<f64>,
) -> Array2<f64> {
    let mut d_mid = d_out.to_owned();
    let d_ff_out = match &cache.drop2 {
        Some(m) => &d_out * m,
        None => d_out.to_owned(),
    };
    let d_act = params.ff_out.backward(cache.ff_act.view(), d_ff_out.view(), &mut grad.ff_out);
    let d_pre = d_act * &cache.ff_pre.mapv(gelu_grad);
    let d_norm2 = params.ff_in.backward(cache.norm2.view(), d_pre.view(), &mut grad.ff_in);
    d_mid += &channel_layernorm_backward(cache.norm2.view(), cache.inv2.view(), d_norm2.view());

    let d_attn = match &cache.drop1 {
        Some(m) => &d_mid * m,
        None => d_mid.clone(),
    };
    let d_norm1 = attention_backward(
        &cache.attention,
        &params.attention,
        heads,
        d_attn.view(),
        extra_raw,
        &mut grad.attention,
        d_mask,
    );
    d_mid + channel_layernorm_backward(cache.norm1.view(), cache.inv1.view(), d_norm1.view())
}

/// One channel-masked transformer layer in inference form (no dropout).
pub fn cmt_layer(hidden: ArrayView2<f64>, mask: &ChannelMask, params: &CmtLayerParams, heads: usize) -> Array2<f64> {
    layer_forward::<rand_chacha::ChaCha8Rng>(hidden, mask.values.view(), params, heads, 0.0, None).output
}

#[derive(Debug, Clone)]
pub(crate) struct PatchCache {
    joint: Array2<f64>,
    hidden: Array2<f64>,
    slope: Option<Array2<f64>>,
    pub mask: Array2<f64>,
    pub layers: Vec<LayerCache>,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub patches: Vec<PatchCache>,
    flat: Array2<f64>,
    pub real: Array2<f64>,
    pub imag: Array2<f64>,
}

/// Gradients arriving at the model outputs.
pub(crate) struct OutputGrads {
    pub real: Array2<f64>,
    pub imag: Array2<f64>,
    /// `[patch][layer][head]` gradients on raw attention scores.
    pub raw_scores: Option<Vec<Vec<Vec<Array2<f64>>>>>,
    /// `[patch]` gradients on the channel masks.
    pub masks: Option<Vec<Array2<f64>>>,
}

fn check_input(x: ArrayView2<f64>, params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    if x.dim() != (cfg.channels, cfg.window) {
        return Err(CatchError::Shape(format!(
            "window is {:?}, model expects ({}, {})",
            x.dim(),
            cfg.channels,
            cfg.window
        )));
    }
    params.check_shapes(cfg)
}

pub(crate) fn forward_cached<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
    mut rng: Option<&mut R>,
) -> Result<(ModelOutput, ForwardCache)> {
    check_input(x, params, cfg)?;
    let spectrum = spectral::rfft(x);
    let bands = spectral::frequency_patches(&spectrum, cfg.patch_size, cfg.patch_stride)?;
    let dropout = if mode == Mode::Eval { 0.0 } else { cfg.dropout };
    let n = cfg.channels;
    let d = cfg.hidden;

    let mut patches = Vec::with_capacity(bands.len());
    let mut traces = Vec::with_capacity(bands.len());
    let mut flat = Array2::zeros((n, bands.len() * d));
    for band in bands {
        let hidden = project_patch(&band, params)?;
        let sample = sample_mask(hidden.view(), &params.mask_generator, cfg.tau, mode, rng.as_deref_mut());
        let mut layers: Vec<LayerCache> = Vec::with_capacity(cfg.layers);
        for layer in &params.layers {
            let input = layers.last().map_or(hidden.view(), |c| c.output.view());
            let cache = layer_forward(input, sample.mask.view(), layer, cfg.heads, dropout, rng.as_deref_mut());
            layers.push(cache);
        }
        let out = layers.last().map_or(hidden.view(), |c| c.output.view());
        let i = band.patch_index;
        flat.slice_mut(s![.., i * d..(i + 1) * d]).assign(&out);
        traces.push(PatchTrace {
            probability: ProbabilityMatrix {
                values: sample.probability.clone(),
                patch_index: i,
            },
            mask: ChannelMask {
                values: sample.mask.clone(),
                patch_index: i,
            },
            attention: layers.iter().map(|c| c.attention.trace(sample.mask.view())).collect(),
        });
        patches.push(PatchCache {
            joint: band.joint,
            hidden,
            slope: sample.slope,
            mask: sample.mask,
            layers,
        });
    }

    let recon_real = params.head_real.forward(flat.view());
    let recon_imag = params.head_imag.forward(flat.view());
    let recon_time = spectral::irfft_parts(recon_real.view(), recon_imag.view(), cfg.window)?;
    let cache = ForwardCache {
        patches,
        flat,
        real: spectrum.real,
        imag: spectrum.imag,
    };
    Ok((
        ModelOutput {
            recon_real,
            recon_imag,
            recon_time,
            traces,
        },
        cache,
    ))
}

/// Backpropagates output gradients through the whole network, accumulating
/// into `grad`. Mask gradients reach the generator through the soft
/// relaxation's slope (straight-through in training mode); in eval mode the
/// generator receives none.
pub(crate) fn backward(
    cache: &ForwardCache,
    params: &ModelParams,
    cfg: &ModelConfig,
    grads: &OutputGrads,
    grad: &mut ModelParams,
) {
    let d = cfg.hidden;
    let d_flat = params.head_real.backward(cache.flat.view(), grads.real.view(), &mut grad.head_real)
        + params.head_imag.backward(cache.flat.view(), grads.imag.view(), &mut grad.head_imag);

    for (i, patch) in cache.patches.iter().enumerate() {
        let mut d_hidden = d_flat.slice(s![.., i * d..(i + 1) * d]).to_owned();
        let mut d_mask = match &grads.masks {
            Some(m) => m[i].clone(),
            None => Array2::zeros(patch.mask.dim()),
        };
        for (l, layer) in patch.layers.iter().enumerate().rev() {
            let extra = grads.raw_scores.as_ref().map(|r| r[i][l].as_slice());
            d_hidden = layer_backward(
                layer,
                &params.layers[l],
                cfg.heads,
                d_hidden.view(),
                extra,
                &mut grad.layers[l],
                &mut d_mask,
            );
        }
        if let Some(slope) = &patch.slope {
            let d_logits = d_mask * slope;
            d_hidden += &params
                .mask_generator
                .backward(patch.hidden.view(), d_logits.view(), &mut grad.mask_generator);
        }
        params
            .patch_projection
            .backward(patch.joint.view(), d_hidden.view(), &mut grad.patch_projection);
    }
}

/// Reconstructs one normalized window.
pub fn forward<R: Rng + ?Sized>(
    window: &TimeWindow,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
    rng: Option<&mut R>,
) -> Result<ModelOutput> {
    forward_cached(window.values.view(), params, cfg, mode, rng).map(|(out, _)| out)
}

/// Eval-mode forward with no randomness.
pub fn reconstruct(x: ArrayView2<f64>, params: &ModelParams, cfg: &ModelConfig) -> Result<ModelOutput> {
    forward_cached::<rand_chacha::ChaCha8Rng>(x, params, cfg, Mode::Eval, None).map(|(out, _)| out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(n: usize) -> ModelConfig {
        ModelConfig {
            channels: n,
            window: 16,
            patch_size: 4,
            patch_stride: 4,
            hidden: 8,
            heads: 2,
            layers: 2,
            ffn_hidden: 12,
            tau: 1.0,
            dropout: 0.0,
        }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn default_config_shapes() {
        let cfg = ModelConfig::new(5, 96);
        cfg.validate().unwrap();
        assert_eq!(cfg.bins(), 49);
        assert_eq!(cfg.patch_count(), 2);
        let mut bad = cfg.clone();
        bad.heads = 5;
        assert!(bad.validate().is_err());
        bad = cfg.clone();
        bad.patch_size = 50;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn projection_cases() {
        let cfg = ModelConfig { hidden: 8, heads: 2, patch_size: 4, ..ModelConfig::new(3, 16) };
        let mut params = ModelParams::zeros(&cfg);
        let patch = spectral::concat_real_imag(Array2::zeros((3, 4)), Array2::zeros((3, 4)), 0).unwrap();
        assert!(project_patch(&patch, &params).unwrap().iter().all(|v| *v == 0.0));

        params.patch_projection.weight = Array2::eye(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patch = spectral::concat_real_imag(random(&mut rng, 3, 4), random(&mut rng, 3, 4), 0).unwrap();
        assert_eq!(project_patch(&patch, &params).unwrap(), patch.joint);

        params.patch_projection = Linear::init(8, 8, &mut rng);
        let got = project_patch(&patch, &params).unwrap();
        for r in 0..3 {
            for c in 0..8 {
                let mut acc = params.patch_projection.bias[c];
                for k in 0..8 {
                    acc += patch.joint[[r, k]] * params.patch_projection.weight[[k, c]];
                }
                assert!((got[[r, c]] - acc).abs() < 1e-12);
            }
        }
        let narrow = spectral::concat_real_imag(Array2::zeros((3, 3)), Array2::zeros((3, 3)), 0).unwrap();
        assert!(project_patch(&narrow, &params).is_err());
    }

    #[test]
    fn saturated_logits() {
        let cfg = small_config(3);
        let mut params = ModelParams::zeros(&cfg);
        let hidden = Array2::zeros((3, 8));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        params.mask_generator.bias.fill(1e3);
        for mode in [Mode::Train, Mode::Eval] {
            let (d, m) = generate_mask(hidden.view(), &params, 1.0, mode, Some(&mut rng), 0);
            assert!(d.values.iter().all(|v| *v == 1.0));
            assert!(m.values.iter().all(|v| *v == 1.0));
        }
        params.mask_generator.bias.fill(-1e3);
        for mode in [Mode::Train, Mode::Eval] {
            let (_, m) = generate_mask(hidden.view(), &params, 1.0, mode, Some(&mut rng), 0);
            assert_eq!(m.values, Array2::eye(3));
        }
    }

    #[test]
    fn seeded_masks_repeat() {
        let cfg = small_config(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::init(&cfg, &mut rng);
        let hidden = random(&mut rng, 4, 8);
        let draw = || {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            generate_mask(hidden.view(), &params, 0.5, Mode::Train, Some(&mut r), 0).1
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn identity_mask_attends_to_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = AttentionParams {
            query: random(&mut rng, 6, 6),
            key: random(&mut rng, 6, 6),
            value: random(&mut rng, 6, 6),
            output: Linear::init(6, 6, &mut rng),
        };
        let x = random(&mut rng, 3, 6);
        let mask = ChannelMask { values: Array2::eye(3), patch_index: 0 };
        let ctx = attention_context(x.view(), &mask, &p, 2);
        assert_eq!(ctx, x.dot(&p.value));
    }

    #[test]
    fn hand_computed_two_channel_attention() {
        // N=2, d=1, one head; Q=K=V=x with W=1.
        let p = AttentionParams {
            query: Array2::ones((1, 1)),
            key: Array2::ones((1, 1)),
            value: Array2::ones((1, 1)),
            output: Linear { weight: Array2::ones((1, 1)), bias: Array1::zeros(1) },
        };
        let x = ndarray::array![[1.0], [2.0]];
        let mask = ChannelMask { values: Array2::ones((2, 2)), patch_index: 0 };
        let (out, trace) = masked_attention(x.view(), &mask, &p, 1);
        // Scores row 0: [1, 2]; row 1: [2, 4].
        let w0 = 1.0 / (1.0 + 1f64.exp());
        let row0 = w0 * 1.0 + (1.0 - w0) * 2.0;
        let w1 = 1.0 / (1.0 + 2f64.exp());
        let row1 = w1 * 1.0 + (1.0 - w1) * 2.0;
        assert!((out[[0, 0]] - row0).abs() < 1e-12);
        assert!((out[[1, 0]] - row1).abs() < 1e-12);
        assert_eq!(trace.raw_scores[0], ndarray::array![[1.0, 2.0], [2.0, 4.0]]);
    }

    #[test]
    fn zero_weights_layer_is_identity() {
        let cfg = small_config(3);
        let params = ModelParams::zeros(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 3, 8);
        let mask = ChannelMask { values: Array2::ones((3, 3)), patch_index: 0 };
        let once = cmt_layer(x.view(), &mask, &params.layers[0], 2);
        assert_eq!(once, x);
        let twice = cmt_layer(once.view(), &mask, &params.layers[1], 2);
        assert_eq!(twice, x);
    }

    #[test]
    fn zero_window_zero_reconstruction() {
        let cfg = small_config(3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = ModelParams::init(&cfg, &mut rng);
        for (name, mut t) in params.tensors_mut() {
            if name.ends_with("bias") {
                t.fill(0.0);
            }
        }
        let out = reconstruct(Array2::zeros((3, 16)).view(), &params, &cfg).unwrap();
        assert!(out.recon_time.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn single_channel_degenerates() {
        let cfg = small_config(1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = ModelParams::init(&cfg, &mut rng);
        let x = random(&mut rng, 1, 16);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let out = forward_cached(x.view(), &params, &cfg, Mode::Train, Some(&mut r)).unwrap().0;
        for t in &out.traces {
            assert_eq!(t.mask.values, Array2::ones((1, 1)));
        }
    }

    #[test]
    fn recon_time_is_inverse_of_recon_spectrum() {
        let cfg = small_config(2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = ModelParams::init(&cfg, &mut rng);
        let x = random(&mut rng, 2, 16);
        let out = reconstruct(x.view(), &params, &cfg).unwrap();
        let spec = spectral::Spectrum {
            real: out.recon_real.clone(),
            imag: out.recon_imag.clone(),
            time_length: 16,
        };
        let back = spectral::irfft(&spec, 16).unwrap();
        assert!(back.iter().zip(out.recon_time.iter()).all(|(a, b)| (a - b).abs() < 1e-8));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = small_config(2);
        let params = ModelParams::zeros(&cfg);
        assert!(reconstruct(Array2::zeros((3, 16)).view(), &params, &cfg).is_err());
        let other = ModelParams::zeros(&small_config(3));
        assert!(reconstruct(Array2::zeros((2, 16)).view(), &other, &cfg).is_err());
    }

    #[test]
    fn partition_tags() {
        let cfg = small_config(2);
        let params = ModelParams::zeros(&cfg);
        let masks: Vec<_> = params
            .tensors()
            .into_iter()
            .filter(|(n, _)| ModelParams::group_of(n) == ParamGroup::Mask)
            .map(|(n, _)| n)
            .collect();
        assert_eq!(masks, vec!["mask_generator.weight", "mask_generator.bias"]);
    }
}
