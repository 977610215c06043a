//! CSV ingestion, instance normalization and sliding-window extraction.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{CatchError, Result};

/// Stddev at or below this is treated as a constant channel.
const CONSTANT_STD: f64 = 1e-12;

/// A multivariate series stored channels-by-time, with optional point labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSeries {
    pub values: Array2<f64>,
    pub labels: Option<Vec<u8>>,
    pub channel_names: Vec<String>,
}

impl LabeledSeries {
    pub fn new(
        values: Array2<f64>,
        labels: Option<Vec<u8>>,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let (n, len) = values.dim();
        if n == 0 {
            return Err(CatchError::Shape("series needs at least one channel".into()));
        }
        if len < 2 {
            return Err(CatchError::Shape(format!("series length {len} < 2")));
        }
        if channel_names.len() != n {
            return Err(CatchError::Shape(format!(
                "{} channel names for {n} channels",
                channel_names.len()
            )));
        }
        if let Some(labels) = &labels {
            if labels.len() != len {
                return Err(CatchError::Shape(format!(
                    "label vector has length {} but series has length {len}",
                    labels.len()
                )));
            }
            if let Some(bad) = labels.iter().find(|&&l| l > 1) {
                return Err(CatchError::Shape(format!("label value {bad} is not binary")));
            }
        }
        Ok(Self {
            values,
            labels,
            channel_names,
        })
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }
}

/// One model input: an `N x T` slice of a series plus the statistics used to
/// normalize it.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeWindow {
    pub values: Array2<f64>,
    /// Per-channel `(mean, stddev)`; empty for a raw window.
    pub norm_stats: Vec<(f64, f64)>,
    pub origin_index: usize,
}

impl TimeWindow {
    pub fn raw(values: Array2<f64>, origin_index: usize) -> Self {
        Self {
            values,
            norm_stats: Vec::new(),
            origin_index,
        }
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }
}

/// Reads a headed CSV. Every column except `label_column` becomes a channel,
/// in file order.
pub fn load_csv(path: impl AsRef<Path>, label_column: Option<&str>) -> Result<LabeledSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CatchError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();

    let label_idx = match label_column {
        Some(name) => Some(headers.iter().position(|h| h == name).ok_or_else(|| {
            CatchError::Shape(format!("label column '{name}' not found in {}", path.display()))
        })?),
        None => None,
    };
    let channel_cols: Vec<usize> = (0..headers.len()).filter(|&i| Some(i) != label_idx).collect();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); channel_cols.len()];
    let mut labels = Vec::new();

    for (row, record) in reader.records().enumerate() {
        let record = record?;
        // Data rows are numbered from 1, the header being row 0.
        let row = row + 1;
        if record.len() != headers.len() {
            return Err(CatchError::Shape(format!(
                "row {row} has {} fields, header has {}",
                record.len(),
                headers.len()
            )));
        }
        for (slot, &col) in channel_cols.iter().enumerate() {
            let cell = record[col].trim();
            let value: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| CatchError::BadCell {
                    row,
                    column: headers[col].clone(),
                    value: cell.to_string(),
                })?;
            columns[slot].push(value);
        }
        if let Some(li) = label_idx {
            let cell = record[li].trim();
            let label = match cell {
                "0" | "0.0" => 0,
                "1" | "1.0" => 1,
                _ => {
                    return Err(CatchError::BadLabel {
                        row,
                        value: cell.to_string(),
                    })
                }
            };
            labels.push(label);
        }
    }

    let len = columns.first().map_or(0, Vec::len);
    let n = columns.len();
    let flat: Vec<f64> = columns.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((n, len), flat)
        .map_err(|e| CatchError::Shape(e.to_string()))?;
    let names = channel_cols.iter().map(|&i| headers[i].clone()).collect();
    LabeledSeries::new(values, label_idx.map(|_| labels), names)
}

/// Writes `series` in the format [`load_csv`] reads, labels last under the
/// header `label`. Values use the shortest representation that round-trips.
pub fn write_csv(series: &LabeledSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CatchError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| CatchError::io(path, e);

    let mut header = series.channel_names.join(",");
    if series.labels.is_some() {
        header.push_str(",label");
    }
    writeln!(out, "{header}").map_err(io)?;
    let mut line = String::new();
    for t in 0..series.len() {
        line.clear();
        for n in 0..series.channels() {
            if n > 0 {
                line.push(',');
            }
            line.push_str(&format!("{}", series.values[[n, t]]));
        }
        if let Some(labels) = &series.labels {
            line.push_str(&format!(",{}", labels[t]));
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Population mean and stddev of one channel.
fn channel_stats(row: ndarray::ArrayView1<f64>) -> (f64, f64) {
    let len = row.len() as f64;
    let mean = row.sum() / len;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / len;
    (mean, var.sqrt())
}

/// Normalizes every channel to zero mean and unit (population) stddev.
/// Constant channels keep a recorded stddev of 1 and become all zeros.
pub fn instance_normalize(window: &TimeWindow) -> TimeWindow {
    let (values, norm_stats) = normalize_matrix(window.values.view());
    TimeWindow {
        values,
        norm_stats,
        origin_index: window.origin_index,
    }
}

pub(crate) fn normalize_matrix(values: ArrayView2<f64>) -> (Array2<f64>, Vec<(f64, f64)>) {
    let mut out = values.to_owned();
    let mut stats = Vec::with_capacity(values.nrows());
    for mut row in out.axis_iter_mut(Axis(0)) {
        let (mean, std) = channel_stats(row.view());
        let std = if std <= CONSTANT_STD { 1.0 } else { std };
        row.mapv_inplace(|x| (x - mean) / std);
        stats.push((mean, std));
    }
    (out, stats)
}

/// Start indices for windows of `window` over `length` at `stride`, with a
/// final window anchored at `length - window` when the stride does not land
/// there exactly.
pub fn window_starts(length: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(CatchError::Config("window stride must be >= 1".into()));
    }
    if window == 0 {
        return Err(CatchError::Config("window size must be >= 1".into()));
    }
    if window > length {
        return Err(CatchError::WindowTooLong { window, length });
    }
    let last = length - window;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().expect("at least one start") != last {
        starts.push(last);
    }
    Ok(starts)
}

/// Raw (un-normalized) windows covering every timestamp of `series`.
pub fn make_windows(series: &LabeledSeries, window: usize, stride: usize) -> Result<Vec<TimeWindow>> {
    let starts = window_starts(series.len(), window, stride)?;
    Ok(starts
        .into_iter()
        .map(|s| {
            TimeWindow::raw(
                series.values.slice(ndarray::s![.., s..s + window]).to_owned(),
                s,
            )
        })
        .collect())
}
