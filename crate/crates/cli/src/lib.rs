//! Command implementations behind the `catch` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use catch_core::config::RunConfig;
use catch_core::metrics::{self, MetricReport, REPORT_KEYS};
use catch_core::model::ModelParams;
use catch_core::scoring::{self, ScoreMode, ScoreSeries};
use catch_core::seriesio::{self, LabeledSeries};
use catch_core::synthgen::{self, AnomalyType, SynthConfig};
use catch_core::{checkpoint, trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SEED_ENV: &str = "CATCH_SEED";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Seed from `CATCH_SEED`, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}=`{v}` is not an integer"))?)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(anyhow!("{SEED_ENV}: {e}")),
    }
}

/// Flag first, then the environment, then `fallback`.
fn pick_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(fallback),
    })
}

/// What one invocation did, written next to its outputs.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub started_unix: u64,
    pub elapsed_secs: f64,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config: String::new(),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: VERSION.to_string(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            elapsed_secs: 0.0,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("command={}\nversion={}\n", self.command, self.version);
        if let Some(s) = self.seed {
            out.push_str(&format!("seed={s}\n"));
        }
        for p in &self.inputs {
            out.push_str(&format!("input={}\n", p.display()));
        }
        for p in &self.outputs {
            out.push_str(&format!("output={}\n", p.display()));
        }
        out.push_str(&format!("started_unix={}\nelapsed_secs={:.3}\n", self.started_unix, self.elapsed_secs));
        if !self.config.is_empty() {
            out.push_str("[config]\n");
            out.push_str(&self.config);
        }
        out
    }
}

/// Manifest path for a single-file output.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest");
    output.with_file_name(name)
}

/// Files written so far; removed on drop unless committed.
struct Outputs {
    files: Vec<PathBuf>,
    created_dir: Option<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new() -> Self {
        Self {
            files: Vec::new(),
            created_dir: None,
            committed: false,
        }
    }

    fn add(&mut self, path: &Path) -> PathBuf {
        self.files.push(path.to_path_buf());
        path.to_path_buf()
    }

    fn finish(mut self, mut manifest: RunManifest, started: Instant, path: &Path) -> Result<()> {
        manifest.outputs = self.files.clone();
        manifest.elapsed_secs = started.elapsed().as_secs_f64();
        let path = self.add(path);
        fs::write(&path, manifest.to_text()).with_context(|| format!("writing {}", path.display()))?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if let Some(d) = &self.created_dir {
            let _ = fs::remove_dir(d);
        }
    }
}

/// Loads a CSV, treating a `label` column as labels when present.
pub fn load_series(path: &Path) -> Result<LabeledSeries> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let has_label = reader
        .headers()
        .with_context(|| format!("cannot read header of {}", path.display()))?
        .iter()
        .any(|h| h.trim() == "label");
    seriesio::load_csv(path, has_label.then_some("label")).with_context(|| format!("loading {}", path.display()))
}

#[derive(Debug, Clone)]
pub struct GenerateArgs {
    pub kind: String,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub train_length: Option<usize>,
    pub test_length: Option<usize>,
}

/// Writes `train.csv`, `test.csv` and `manifest.txt` into `out_dir`.
pub fn cmd_generate(args: &GenerateArgs) -> Result<Vec<PathBuf>> {
    let started = Instant::now();
    let kind: AnomalyType = args.kind.parse()?;
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        seed: pick_seed(args.seed, defaults.seed)?,
        train_length: args.train_length.unwrap_or(defaults.train_length),
        test_length: args.test_length.unwrap_or(defaults.test_length),
        ..defaults
    };
    let (train, test) = synthgen::synthesize_with(&cfg, kind)?;

    let mut outputs = Outputs::new();
    if !args.out_dir.exists() {
        fs::create_dir_all(&args.out_dir).with_context(|| format!("cannot create {}", args.out_dir.display()))?;
        outputs.created_dir = Some(args.out_dir.clone());
    }
    let train_path = outputs.add(&args.out_dir.join("train.csv"));
    seriesio::write_csv(&train, &train_path)?;
    let test_path = outputs.add(&args.out_dir.join("test.csv"));
    seriesio::write_csv(&test, &test_path)?;

    let mut manifest = RunManifest::new("generate");
    manifest.seed = Some(cfg.seed);
    manifest.config = synthgen::manifest(&cfg, kind);
    let manifest_file = args.out_dir.join("manifest.txt");
    outputs.finish(manifest, started, &manifest_file)?;
    Ok(vec![train_path, test_path, manifest_file])
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub out: PathBuf,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub losses: PathBuf,
    pub steps: usize,
    pub final_loss: Option<f64>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

/// Trains on `data_dir/train.csv`, writing the checkpoint, `losses.csv` beside it and a manifest.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let started = Instant::now();
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
        cfg.train.outer_steps = None;
    }
    cfg.train.seed = pick_seed(args.seed, cfg.train.seed)?;

    if !args.data_dir.is_dir() {
        bail!("data directory {} does not exist", args.data_dir.display());
    }
    let data_path = args.data_dir.join("train.csv");
    if !data_path.is_file() {
        bail!("training file {} does not exist", data_path.display());
    }
    let series = load_series(&data_path)?;
    let model_cfg = cfg.model_for(series.channels())?;
    cfg.train.validate()?;
    let windows = trainer::training_windows(&series, model_cfg.window, cfg.train.window_stride)?;
    let init = ModelParams::init(&model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed));
    let (params, report) = trainer::bilevel_train(&windows, init, &model_cfg, &cfg.train)?;

    let mut outputs = Outputs::new();
    let ckpt = outputs.add(&args.out);
    checkpoint::save(&ckpt, &model_cfg, &params)?;
    let losses = outputs.add(&args.out.with_file_name("losses.csv"));
    trainer::write_loss_csv(&report, &losses)?;

    let mut manifest = RunManifest::new("train");
    manifest.seed = Some(cfg.train.seed);
    cfg.channels = Some(model_cfg.channels);
    cfg.model = model_cfg;
    manifest.config = cfg.to_text();
    manifest.inputs.push(data_path);
    manifest.inputs.extend(args.config.clone());
    outputs.finish(manifest, started, &manifest_path(&args.out))?;
    Ok(TrainSummary {
        checkpoint: ckpt,
        losses,
        steps: report.records.len(),
        final_loss: report.records.last().map(|r| r.total),
    })
}

#[derive(Debug, Clone, Default)]
pub struct ScoreArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub score_lambda: Option<f64>,
    pub inference_patch_size: Option<usize>,
    pub score_mode: Option<ScoreMode>,
    pub threshold_ratio: Option<f64>,
}

pub const SCORE_HEADER: [&str; 6] = ["index", "time_score", "freq_score", "final_score", "prediction", "label"];

/// Scores `data` (a CSV file, or a directory holding `test.csv`).
pub fn cmd_score(args: &ScoreArgs) -> Result<ScoreSeries> {
    let started = Instant::now();
    let mut cfg = load_config(args.config.as_deref())?;
    let s = &mut cfg.score;
    if let Some(v) = args.score_lambda {
        s.score_lambda = v;
    }
    if let Some(v) = args.inference_patch_size {
        s.inference_patch_size = v;
    }
    if let Some(v) = args.score_mode {
        s.mode = v;
    }
    if let Some(v) = args.threshold_ratio {
        s.threshold_ratio = v;
    }
    let data_path = if args.data.is_dir() { args.data.join("test.csv") } else { args.data.clone() };
    if !data_path.is_file() {
        bail!("data file {} does not exist", data_path.display());
    }
    let (model_cfg, params) =
        checkpoint::load(&args.checkpoint).with_context(|| format!("checkpoint {}", args.checkpoint.display()))?;
    let series = load_series(&data_path)?;
    let scores = scoring::score_series(&params, &series, &model_cfg, &cfg.score)?;

    let mut outputs = Outputs::new();
    let out = outputs.add(&args.out);
    write_scores(&scores, &out)?;
    let mut manifest = RunManifest::new("score");
    cfg.channels = Some(model_cfg.channels);
    cfg.model = model_cfg;
    manifest.config = cfg.to_text();
    manifest.inputs = vec![args.checkpoint.clone(), data_path];
    manifest.inputs.extend(args.config.clone());
    outputs.finish(manifest, started, &manifest_path(&args.out))?;
    Ok(scores)
}

pub fn write_scores(s: &ScoreSeries, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    let cols = if s.labels.is_some() { 6 } else { 5 };
    w.write_record(&SCORE_HEADER[..cols])?;
    for i in 0..s.len() {
        let pred = s.predictions.as_ref().map_or(0, |p| p[i]);
        let mut row = vec![
            i.to_string(),
            s.time_score[i].to_string(),
            s.freq_score[i].to_string(),
            s.final_score[i].to_string(),
            pred.to_string(),
        ];
        if let Some(l) = &s.labels {
            row.push(l[i].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a score CSV; errors carry the file line number.
pub fn read_scores(path: &Path) -> Result<ScoreSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let headers: Vec<String> = reader
        .headers()
        .with_context(|| format!("{}: line 1: bad header", path.display()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| anyhow!("{}: line 1: missing column `{name}`", path.display()));
    let (ti, fi, ci, pi) = (need("time_score")?, need("freq_score")?, need("final_score")?, need("prediction")?);
    let li = col("label");

    let mut s = ScoreSeries {
        time_score: Vec::new(),
        freq_score: Vec::new(),
        final_score: Vec::new(),
        predictions: Some(Vec::new()),
        labels: li.map(|_| Vec::new()),
    };
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            anyhow!("{}: line {line}: {e}", path.display())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            bail!("{}: line {line}: expected {} fields, found {}", path.display(), headers.len(), record.len());
        }
        let num = |i: usize| -> Result<f64> {
            let cell = record[i].trim();
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| anyhow!("{}: line {line}: `{cell}` in column `{}` is not a finite number", path.display(), headers[i]))
        };
        let flag = |i: usize| -> Result<u8> {
            match record[i].trim() {
                "0" => Ok(0),
                "1" => Ok(1),
                other => bail!("{}: line {line}: `{other}` in column `{}` is not 0 or 1", path.display(), headers[i]),
            }
        };
        s.time_score.push(num(ti)?);
        s.freq_score.push(num(fi)?);
        s.final_score.push(num(ci)?);
        s.predictions.as_mut().unwrap().push(flag(pi)?);
        if let (Some(li), Some(labels)) = (li, s.labels.as_mut()) {
            labels.push(flag(li)?);
        }
    }
    if s.is_empty() {
        bail!("{}: no score rows", path.display());
    }
    Ok(s)
}

/// Computes the metric report; writes CSV when `out` ends in `.csv`, `key=value` lines otherwise.
pub fn cmd_eval(scores_csv: &Path, out: &Path) -> Result<MetricReport> {
    let started = Instant::now();
    let s = read_scores(scores_csv)?;
    let labels = s
        .labels
        .as_ref()
        .ok_or_else(|| anyhow!("{}: no `label` column to evaluate against", scores_csv.display()))?;
    let report = metrics::evaluate(&s.final_score, s.predictions.as_ref().unwrap(), labels)?;

    let mut outputs = Outputs::new();
    let path = outputs.add(out);
    let text = if out.extension().is_some_and(|e| e == "csv") {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<&str> = REPORT_KEYS.to_vec();
        header.push("notes");
        w.write_record(&header)?;
        let mut row = report.row();
        row.push(report.notes.join("; "));
        w.write_record(&row)?;
        String::from_utf8(w.into_inner()?)?
    } else {
        report.to_key_values()
    };
    fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    let mut manifest = RunManifest::new("eval");
    manifest.inputs.push(scores_csv.to_path_buf());
    outputs.finish(manifest, started, &manifest_path(out))?;
    Ok(report)
}

const PLOT_WIDTH: f64 = 1000.0;
const TRACK_HEIGHT: f64 = 120.0;
const MARGIN: f64 = 20.0;

/// Column-wise maxima, one per pixel column, so spikes survive downsampling.
fn bucket_max(v: &[f64], buckets: usize) -> Vec<f64> {
    if v.len() <= buckets {
        return v.to_vec();
    }
    (0..buckets)
        .map(|b| {
            let lo = b * v.len() / buckets;
            let hi = ((b + 1) * v.len() / buckets).max(lo + 1);
            v[lo..hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn polyline(v: &[f64], top: f64, lo: f64, hi: f64, color: &str) -> String {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let inner = TRACK_HEIGHT - 2.0 * MARGIN;
    let step = if v.len() > 1 { PLOT_WIDTH / (v.len() - 1) as f64 } else { 0.0 };
    let points: Vec<String> = v
        .iter()
        .enumerate()
        .map(|(i, &y)| format!("{:.2},{:.2}", i as f64 * step, top + MARGIN + inner * (1.0 - (y - lo) / span)))
        .collect();
    format!(
        "    <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1\" points=\"{}\"/>\n",
        points.join(" ")
    )
}

fn spans(flags: &[u8], len: usize, top: f64, height: f64, color: &str) -> String {
    let scale = PLOT_WIDTH / len as f64;
    let mut out = String::new();
    for e in metrics::EventList::from_binary(flags).intervals {
        out.push_str(&format!(
            "    <rect x=\"{:.2}\" y=\"{top:.2}\" width=\"{:.2}\" height=\"{height:.2}\" fill=\"{color}\"/>\n",
            e.0 as f64 * scale,
            ((e.1 - e.0) as f64 * scale).max(0.5)
        ));
    }
    out
}

fn range(vs: &[&[f64]]) -> (f64, f64) {
    let it = || vs.iter().flat_map(|v| v.iter().cloned());
    (it().fold(f64::INFINITY, f64::min), it().fold(f64::NEG_INFINITY, f64::max))
}

pub fn render_svg(s: &ScoreSeries) -> String {
    let n = s.len();
    let buckets = PLOT_WIDTH as usize;
    let height = 3.0 * TRACK_HEIGHT;
    let mut out = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_WIDTH}\" height=\"{height}\" viewBox=\"0 0 {PLOT_WIDTH} {height}\">\n"
    );

    out.push_str("  <g id=\"labels\">\n");
    out.push_str(&format!("    <text x=\"4\" y=\"14\" font-size=\"12\">labels (top) / predictions (bottom), {n} points</text>\n"));
    let band = (TRACK_HEIGHT - 2.0 * MARGIN) / 2.0;
    if let Some(l) = &s.labels {
        out.push_str(&spans(l, n, MARGIN, band, "#d62728"));
    }
    if let Some(p) = &s.predictions {
        out.push_str(&spans(p, n, MARGIN + band, band, "#1f77b4"));
    }
    out.push_str("  </g>\n");

    let time = bucket_max(&s.time_score, buckets);
    let freq = bucket_max(&s.freq_score, buckets);
    let (lo, hi) = range(&[&time, &freq]);
    out.push_str("  <g id=\"domain-scores\">\n");
    out.push_str(&format!("    <text x=\"4\" y=\"{:.0}\" font-size=\"12\">time score / frequency score</text>\n", TRACK_HEIGHT + 14.0));
    out.push_str(&polyline(&time, TRACK_HEIGHT, lo, hi, "#2ca02c"));
    out.push_str(&polyline(&freq, TRACK_HEIGHT, lo, hi, "#ff7f0e"));
    out.push_str("  </g>\n");

    let fin = bucket_max(&s.final_score, buckets);
    let (lo, hi) = range(&[&fin]);
    out.push_str("  <g id=\"final-score\">\n");
    out.push_str(&format!("    <text x=\"4\" y=\"{:.0}\" font-size=\"12\">final score</text>\n", 2.0 * TRACK_HEIGHT + 14.0));
    out.push_str(&polyline(&fin, 2.0 * TRACK_HEIGHT, lo, hi, "#9467bd"));
    out.push_str("  </g>\n</svg>\n");
    out
}

pub fn cmd_plot(scores_csv: &Path, out: &Path) -> Result<()> {
    let started = Instant::now();
    let s = read_scores(scores_csv)?;
    let mut outputs = Outputs::new();
    let path = outputs.add(out);
    fs::write(&path, render_svg(&s)).with_context(|| format!("cannot write {}", path.display()))?;
    let mut manifest = RunManifest::new("plot");
    manifest.inputs.push(scores_csv.to_path_buf());
    outputs.finish(manifest, started, &manifest_path(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ScoreSeries {
        ScoreSeries {
            time_score: vec![0.1, 0.2, 3.0, 0.1],
            freq_score: vec![0.0, 0.1, 1.0, 0.0],
            final_score: vec![0.1, 0.205, 3.05, 0.1],
            predictions: Some(vec![0, 0, 1, 0]),
            labels: Some(vec![0, 0, 1, 1]),
        }
    }

    #[test]
    fn scores_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_scores(&sample(), &p).unwrap();
        assert_eq!(read_scores(&p).unwrap(), sample());
    }

    #[test]
    fn malformed_score_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        fs::write(&p, "index,time_score,freq_score,final_score,prediction,label\n0,1,1,1,0,0\n1,x,1,1,0,0\n").unwrap();
        let err = read_scores(&p).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn manifest_sits_beside_output() {
        assert_eq!(manifest_path(Path::new("a/b/model.ckpt")), PathBuf::from("a/b/model.ckpt.manifest"));
    }

    #[test]
    fn svg_has_three_tracks() {
        let svg = render_svg(&sample());
        assert_eq!(svg.matches("<g ").count(), 3);
        assert_eq!(svg, render_svg(&sample()));
    }

    #[test]
    fn bucket_max_keeps_spikes() {
        let mut v = vec![0.0; 5000];
        v[1234] = 9.0;
        let b = bucket_max(&v, 1000);
        assert_eq!(b.len(), 1000);
        assert_eq!(b.iter().cloned().fold(0.0, f64::max), 9.0);
    }
}
