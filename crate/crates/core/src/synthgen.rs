//! Synthetic multivariate benchmarks: periodic base signals with injected
//! point and subsequence anomalies.
//!
//! Each channel is `coef * wave(2 pi freq t) + offset + noise` with uniform
//! noise. Injection centers are drawn uniformly over the series; point
//! injectors touch one timestamp per center, collective injectors rewrite the
//! interval `[center - radius, center + radius)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CatchError, Result};
use crate::seriesio::LabeledSeries;

/// Base levels for successive square-wave injections, used cyclically.
pub const SQUARE_BASE_VALUES: [f64; 9] = [0.145, 0.128, 0.094, 0.077, 0.111, 0.145, 0.179, 0.214, 0.214];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Behavior {
    Sine,
    Cosine,
}

impl Behavior {
    fn wave(self, phase: f64) -> f64 {
        match self {
            Behavior::Sine => phase.sin(),
            Behavior::Cosine => phase.cos(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub behaviors: Vec<Behavior>,
    pub train_length: usize,
    pub test_length: usize,
    /// Cycles per step.
    pub freq: f64,
    pub coef: f64,
    pub offset: f64,
    pub noise_amp: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        use Behavior::*;
        Self {
            behaviors: vec![Sine, Cosine, Sine, Cosine, Sine],
            train_length: 20000,
            test_length: 5000,
            freq: 0.04,
            coef: 1.5,
            offset: 0.0,
            noise_amp: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn dims(&self) -> usize {
        self.behaviors.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.behaviors.is_empty() {
            return Err(CatchError::Config("at least one channel behavior is required".into()));
        }
        if self.train_length < 2 || self.test_length < 2 {
            return Err(CatchError::Config(format!(
                "series lengths must be >= 2, got {} and {}",
                self.train_length, self.test_length
            )));
        }
        if !(self.freq > 0.0) {
            return Err(CatchError::Config(format!("freq must be > 0, got {}", self.freq)));
        }
        if !(self.noise_amp >= 0.0) {
            return Err(CatchError::Config(format!("noise_amp must be >= 0, got {}", self.noise_amp)));
        }
        Ok(())
    }
}

/// Square-wave replacement signal parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareWave {
    pub coef: f64,
    pub noise_amp: f64,
    /// Number of odd harmonics summed.
    pub level: usize,
    pub freq: f64,
    pub base: Vec<f64>,
    pub offset: f64,
}

impl Default for SquareWave {
    fn default() -> Self {
        Self {
            coef: 1.5,
            noise_amp: 0.03,
            level: 20,
            freq: 0.04,
            base: SQUARE_BASE_VALUES.to_vec(),
            offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectionKind {
    PointGlobal,
    PointContextual,
    CollectiveGlobalSquare,
    CollectiveSeasonal,
    CollectiveTrend,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionSpec {
    pub kind: InjectionKind,
    pub ratio: f64,
    pub factor: f64,
    pub radius: usize,
    pub square: SquareWave,
}

impl InjectionSpec {
    pub fn new(kind: InjectionKind, ratio: f64, factor: f64) -> Self {
        Self {
            kind,
            ratio,
            factor,
            radius: 5,
            square: SquareWave::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(CatchError::Config(format!("injection ratio must be in [0, 1), got {}", self.ratio)));
        }
        if self.radius == 0 {
            return Err(CatchError::Config("injection radius must be >= 1".into()));
        }
        Ok(())
    }

    fn center_count(&self, length: usize) -> usize {
        let n = length as f64 * self.ratio;
        match self.kind {
            InjectionKind::PointGlobal | InjectionKind::PointContextual => n.round() as usize,
            _ => (n / (2 * self.radius) as f64).round() as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyType {
    Global,
    Contextual,
    Shapelet,
    Seasonal,
    Trend,
    Mixed,
}

impl AnomalyType {
    pub const ALL: [AnomalyType; 6] = [
        AnomalyType::Global,
        AnomalyType::Contextual,
        AnomalyType::Shapelet,
        AnomalyType::Seasonal,
        AnomalyType::Trend,
        AnomalyType::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyType::Global => "global",
            AnomalyType::Contextual => "contextual",
            AnomalyType::Shapelet => "shapelet",
            AnomalyType::Seasonal => "seasonal",
            AnomalyType::Trend => "trend",
            AnomalyType::Mixed => "mixed",
        }
    }

    /// Injections applied to each channel, in order.
    pub fn injections(self) -> Vec<InjectionSpec> {
        use InjectionKind::*;
        match self {
            AnomalyType::Global => vec![InjectionSpec::new(PointGlobal, 0.01, 3.5)],
            AnomalyType::Contextual => vec![InjectionSpec::new(PointContextual, 0.01, 2.5)],
            AnomalyType::Shapelet => vec![InjectionSpec::new(CollectiveGlobalSquare, 0.01, 0.0)],
            AnomalyType::Seasonal => vec![InjectionSpec::new(CollectiveSeasonal, 0.01, 3.0)],
            AnomalyType::Trend => vec![InjectionSpec::new(CollectiveTrend, 0.01, 0.5)],
            AnomalyType::Mixed => vec![
                InjectionSpec::new(CollectiveGlobalSquare, 0.006, 0.0),
                InjectionSpec::new(CollectiveSeasonal, 0.006, 3.0),
                InjectionSpec::new(CollectiveTrend, 0.006, 0.5),
            ],
        }
    }
}

impl fmt::Display for AnomalyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnomalyType {
    type Err = CatchError;

    fn from_str(s: &str) -> Result<Self> {
        AnomalyType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| CatchError::Unknown {
                kind: "anomaly type",
                name: s.to_string(),
                valid: AnomalyType::ALL.map(|t| t.name()).join(", "),
            })
    }
}

fn noise<R: Rng + ?Sized>(amp: f64, rng: &mut R) -> f64 {
    if amp > 0.0 {
        rng.random_range(-amp..=amp)
    } else {
        0.0
    }
}

/// Value of channel behavior `b` at time `t` for frequency `freq`.
fn base_value<R: Rng + ?Sized>(cfg: &SynthConfig, b: Behavior, freq: f64, t: usize, rng: &mut R) -> f64 {
    cfg.coef * b.wave(2.0 * PI * freq * t as f64) + cfg.offset + noise(cfg.noise_amp, rng)
}

/// Clean multichannel signal of the given length, channels-by-time.
pub fn generate_base<R: Rng + ?Sized>(cfg: &SynthConfig, length: usize, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::zeros((cfg.dims(), length));
    for (c, &b) in cfg.behaviors.iter().enumerate() {
        for t in 0..length {
            out[[c, t]] = base_value(cfg, b, cfg.freq, t, rng);
        }
    }
    out
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Applies one injection to channel `channel` of `values` and returns that
/// channel's labels (1 on every mutated timestamp).
pub fn inject<R: Rng + ?Sized>(
    values: &mut Array2<f64>,
    channel: usize,
    spec: &InjectionSpec,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Vec<u8>> {
    spec.validate()?;
    let (dims, len) = values.dim();
    if channel >= dims {
        return Err(CatchError::Shape(format!("channel {channel} out of range for {dims} channels")));
    }
    let behavior = *cfg
        .behaviors
        .get(channel)
        .ok_or_else(|| CatchError::Shape(format!("no behavior configured for channel {channel}")))?;
    let centers: Vec<usize> = (0..spec.center_count(len)).map(|_| rng.random_range(0..len)).collect();
    let origin = values.row(channel).to_vec();
    let max = origin.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = origin.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut labels = vec![0u8; len];
    let mut row = values.row_mut(channel);
    let r = spec.radius;

    for (k, &i) in centers.iter().enumerate() {
        let (start, end) = (i.saturating_sub(r), (i + r).min(len));
        match spec.kind {
            InjectionKind::PointGlobal => {
                // Scale by the local spread, then push small results out to
                // the channel's extreme on the same side of zero.
                let (_, local_std) = mean_std(&origin[start..end]);
                let mut v = origin[i] * spec.factor * local_std;
                if (0.0..max).contains(&v) {
                    v = max;
                } else if v < 0.0 && v > min {
                    v = min;
                }
                row[i] = v;
                labels[i] = 1;
            }
            InjectionKind::PointContextual => {
                // v = local_mean + factor * local_std * sign(x - local_mean),
                // clamped to the channel range: unusual for its neighborhood
                // while staying inside the global envelope.
                let (mean, std) = mean_std(&origin[start..end]);
                let sign = if origin[i] >= mean { 1.0 } else { -1.0 };
                row[i] = (mean + spec.factor * std * sign).clamp(min, max);
                labels[i] = 1;
            }
            InjectionKind::CollectiveGlobalSquare => {
                let sq = &spec.square;
                let level = if sq.base.is_empty() { 0.0 } else { sq.base[k % sq.base.len()] };
                for t in start..end {
                    let mut v = level;
                    for h in 0..sq.level {
                        let odd = (2 * h + 1) as f64;
                        let wave = (2.0 * PI * sq.freq * odd * t as f64).sin() + noise(sq.noise_amp, rng);
                        v += (sq.coef * wave + sq.offset) / odd;
                    }
                    row[t] = v;
                    labels[t] = 1;
                }
            }
            InjectionKind::CollectiveSeasonal => {
                for t in start..end {
                    row[t] = base_value(cfg, behavior, cfg.freq * spec.factor, t, rng);
                    labels[t] = 1;
                }
            }
            InjectionKind::CollectiveTrend => {
                let direction = if rng.random::<bool>() { 1.0 } else { -1.0 };
                for (step, t) in (start..end).enumerate() {
                    row[t] = origin[t] + direction * spec.factor * step as f64;
                    labels[t] = 1;
                }
            }
        }
    }
    Ok(labels)
}

/// Clean train split and injected test split for one anomaly type.
pub fn synthesize_with(cfg: &SynthConfig, kind: AnomalyType) -> Result<(LabeledSeries, LabeledSeries)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = generate_base(cfg, cfg.train_length, &mut rng);
    let mut test = generate_base(cfg, cfg.test_length, &mut rng);
    let mut labels = vec![0u8; cfg.test_length];
    for channel in 0..cfg.dims() {
        for spec in kind.injections() {
            let l = inject(&mut test, channel, &spec, cfg, &mut rng)?;
            labels.iter_mut().zip(l).for_each(|(a, b)| *a |= b);
        }
    }
    let names: Vec<String> = (0..cfg.dims()).map(|c| format!("ch{c}")).collect();
    let train_labels = vec![0u8; cfg.train_length];
    Ok((
        LabeledSeries::new(train, Some(train_labels), names.clone())?,
        LabeledSeries::new(test, Some(labels), names)?,
    ))
}

pub fn synthesize(kind: AnomalyType, seed: u64) -> Result<(LabeledSeries, LabeledSeries)> {
    synthesize_with(&SynthConfig { seed, ..Default::default() }, kind)
}

/// Human-readable record of every generation constant.
pub fn manifest(cfg: &SynthConfig, kind: AnomalyType) -> String {
    let mut out = String::new();
    let behaviors: Vec<&str> = cfg
        .behaviors
        .iter()
        .map(|b| match b {
            Behavior::Sine => "sine",
            Behavior::Cosine => "cosine",
        })
        .collect();
    out.push_str(&format!("type={kind}\nseed={}\n", cfg.seed));
    out.push_str(&format!("dims={}\nbehaviors={}\n", cfg.dims(), behaviors.join(",")));
    out.push_str(&format!(
        "train_length={}\ntest_length={}\nfreq={}\ncoef={}\noffset={}\nnoise_amp={}\n",
        cfg.train_length, cfg.test_length, cfg.freq, cfg.coef, cfg.offset, cfg.noise_amp
    ));
    for (i, spec) in kind.injections().iter().enumerate() {
        out.push_str(&format!(
            "injection.{i}={:?} ratio={} factor={} radius={}",
            spec.kind, spec.ratio, spec.factor, spec.radius
        ));
        if spec.kind == InjectionKind::CollectiveGlobalSquare {
            let sq = &spec.square;
            let base: Vec<String> = sq.base.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!(
                " coef={} noise_amp={} level={} freq={} offset={} base={}",
                sq.coef,
                sq.noise_amp,
                sq.level,
                sq.freq,
                sq.offset,
                base.join(",")
            ));
        }
        out.push('\n');
    }
    out
}

/// Labeled fraction of a label vector.
pub fn anomaly_ratio(labels: &[u8]) -> f64 {
    labels.iter().map(|&l| l as usize).sum::<usize>() as f64 / labels.len() as f64
}
