//! Detection metrics: confusion-table scores, ROC and PR areas, and
//! affiliation precision/recall.
//!
//! Affiliation metrics treat each labeled event `[start, end)` as a segment
//! on a continuous time axis. The axis is split into one zone per true event
//! (boundaries at the midpoints between consecutive events). Inside a zone,
//! predicted time is scored by how its distance to the event compares with
//! the distance of a point drawn uniformly from the zone, and the event's
//! time by its distance to the nearest prediction in the zone. Both sides
//! average over zones (macro over events).

use crate::error::{CatchError, Result};

/// Half-open `[start, end)` index ranges of consecutive ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventList {
    pub intervals: Vec<(usize, usize)>,
}

impl EventList {
    pub fn from_binary(v: &[u8]) -> Self {
        let mut intervals = Vec::new();
        let mut start = None;
        for (i, &x) in v.iter().enumerate() {
            match (x != 0, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    intervals.push((s, i));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            intervals.push((s, v.len()));
        }
        Self { intervals }
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confusion {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Score-based and label-based metrics. Entries that are undefined for the
/// given labels are `None`, with the reason in `notes`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc_roc: Option<f64>,
    pub auc_pr: Option<f64>,
    pub aff_p: Option<f64>,
    pub aff_r: Option<f64>,
    pub aff_f: Option<f64>,
    pub notes: Vec<String>,
}

pub const REPORT_KEYS: [&str; 9] = [
    "accuracy", "precision", "recall", "f1", "auc_roc", "auc_pr", "aff_p", "aff_r", "aff_f",
];

impl MetricReport {
    fn values(&self) -> [Option<f64>; 9] {
        [
            Some(self.accuracy),
            Some(self.precision),
            Some(self.recall),
            Some(self.f1),
            self.auc_roc,
            self.auc_pr,
            self.aff_p,
            self.aff_r,
            self.aff_f,
        ]
    }

    /// Values in [`REPORT_KEYS`] order; undefined entries print as `NA`.
    pub fn row(&self) -> Vec<String> {
        self.values()
            .iter()
            .map(|v| v.map_or_else(|| "NA".to_string(), |x| x.to_string()))
            .collect()
    }

    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (k, v) in REPORT_KEYS.iter().zip(self.row()) {
            out.push_str(&format!("{k}={v}\n"));
        }
        for n in &self.notes {
            out.push_str(&format!("note={n}\n"));
        }
        out
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(CatchError::Shape(format!("length mismatch: {a} predictions/scores vs {b} labels")));
    }
    Ok(())
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p > 0.0 && r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

pub fn confusion_metrics(pred: &[u8], labels: &[u8]) -> Result<Confusion> {
    check_lengths(pred.len(), labels.len())?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in pred.iter().zip(labels) {
        match (p != 0, l != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(Confusion {
        accuracy: ratio(tp + tn, pred.len()),
        precision,
        recall,
        f1: harmonic(precision, recall),
    })
}

/// Indices of `scores` grouped by equal value, in ascending score order.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(CatchError::Undefined(
            "AUC-ROC needs at least one positive and one negative label".into(),
        ));
    }
    let mut wins = 0.0;
    let mut below = 0usize;
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i] != 0).count();
        let n = g.len() - p;
        wins += p as f64 * (below as f64 + 0.5 * n as f64);
        below += n;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Average precision: sum over distinct thresholds (high to low) of the
/// recall gained times the precision at that threshold.
pub fn auc_pr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let pos = labels.iter().filter(|&&l| l != 0).count();
    if pos == 0 {
        return Err(CatchError::Undefined("AUC-PR needs at least one positive label".into()));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut area = 0.0;
    for g in tie_groups(scores).into_iter().rev() {
        let p = g.iter().filter(|&&i| labels[i] != 0).count();
        tp += p;
        seen += g.len();
        area += (p as f64 / pos as f64) * (tp as f64 / seen as f64);
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy)]
struct Span {
    start: f64,
    end: f64,
}

impl Span {
    fn len(&self) -> f64 {
        self.end - self.start
    }

    fn distance(&self, x: f64) -> f64 {
        if x < self.start {
            self.start - x
        } else if x > self.end {
            x - self.end
        } else {
            0.0
        }
    }
}

/// Measure of `{x in zone : dist(x, event) >= d}` over the zone length.
fn survival_to_event(zone: Span, event: Span, d: f64) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    let left = ((event.start - d) - zone.start).max(0.0);
    let right = (zone.end - (event.end + d)).max(0.0);
    ((left + right) / zone.len()).min(1.0)
}

/// Measure of `{x in zone : |x - y| >= d}` over the zone length.
fn survival_to_point(zone: Span, y: f64, d: f64) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    let left = ((y - d) - zone.start).max(0.0);
    let right = (zone.end - (y + d)).max(0.0);
    ((left + right) / zone.len()).min(1.0)
}

/// Integrands are piecewise linear with breakpoints on a 1/8 grid when all
/// interval ends lie on the 1/2 grid, so the midpoint rule at 1/8 steps is
/// exact up to rounding.
const CELLS_PER_UNIT: f64 = 8.0;

fn mean_over(span: Span, f: impl Fn(f64) -> f64) -> f64 {
    let cells = (span.len() * CELLS_PER_UNIT).round() as usize;
    if cells == 0 {
        return f(span.start);
    }
    let h = span.len() / cells as f64;
    (0..cells).map(|k| f(span.start + (k as f64 + 0.5) * h)).sum::<f64>() / cells as f64
}

fn zones(events: &[Span], length: f64) -> Vec<Span> {
    (0..events.len())
        .map(|j| {
            let start = if j == 0 { 0.0 } else { (events[j - 1].end + events[j].start) / 2.0 };
            let end = if j + 1 == events.len() {
                length
            } else {
                (events[j].end + events[j + 1].start) / 2.0
            };
            Span { start, end }
        })
        .collect()
}

/// Affiliation precision, recall and their harmonic mean.
pub fn affiliation_prf(pred: &[u8], labels: &[u8]) -> Result<(f64, f64, f64)> {
    check_lengths(pred.len(), labels.len())?;
    let to_spans = |v: &[u8]| -> Vec<Span> {
        EventList::from_binary(v)
            .intervals
            .into_iter()
            .map(|(s, e)| Span { start: s as f64, end: e as f64 })
            .collect()
    };
    let truth = to_spans(labels);
    if truth.is_empty() {
        return Err(CatchError::Undefined("affiliation metrics need at least one labeled event".into()));
    }
    let predicted = to_spans(pred);
    let zone_list = zones(&truth, labels.len() as f64);

    let mut precisions = Vec::new();
    let mut recall_sum = 0.0;
    for (event, zone) in truth.iter().zip(&zone_list) {
        let parts: Vec<Span> = predicted
            .iter()
            .filter_map(|p| {
                let s = p.start.max(zone.start);
                let e = p.end.min(zone.end);
                (e > s).then_some(Span { start: s, end: e })
            })
            .collect();
        if parts.is_empty() {
            continue;
        }
        let total: f64 = parts.iter().map(Span::len).sum();
        let precision: f64 = parts
            .iter()
            .map(|p| p.len() * mean_over(*p, |x| survival_to_event(*zone, *event, event.distance(x))))
            .sum::<f64>()
            / total;
        precisions.push(precision);
        recall_sum += mean_over(*event, |y| {
            let d = parts.iter().map(|p| p.distance(y)).fold(f64::INFINITY, f64::min);
            survival_to_point(*zone, y, d)
        });
    }
    let p = if precisions.is_empty() {
        0.0
    } else {
        precisions.iter().sum::<f64>() / precisions.len() as f64
    };
    let r = recall_sum / truth.len() as f64;
    Ok((p, r, harmonic(p, r)))
}

/// All metrics for one score series. Label-based entries are always
/// computed; score-based and event-based ones are `None` when the labels
/// leave them undefined.
pub fn evaluate(scores: &[f64], pred: &[u8], labels: &[u8]) -> Result<MetricReport> {
    check_lengths(scores.len(), labels.len())?;
    let c = confusion_metrics(pred, labels)?;
    let mut notes = Vec::new();
    let mut keep = |r: Result<f64>| match r {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(e.to_string());
            None
        }
    };
    let auc_roc = keep(auc_roc(scores, labels));
    let auc_pr = keep(auc_pr(scores, labels));
    let aff = match affiliation_prf(pred, labels) {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(e.to_string());
            None
        }
    };
    Ok(MetricReport {
        accuracy: c.accuracy,
        precision: c.precision,
        recall: c.recall,
        f1: c.f1,
        auc_roc,
        auc_pr,
        aff_p: aff.map(|a| a.0),
        aff_r: aff.map(|a| a.1),
        aff_f: aff.map(|a| a.2),
        notes,
    })
}
