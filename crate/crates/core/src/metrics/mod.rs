//! Binary classification metrics built from one-vs-rest confusion counts.
//!
//! Every per-class quantity is weighted by `w_c = N_c / N`. Ratios with a
//! zero denominator contribute 0 and leave a note in the report's flags.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 2;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Class-1 probabilities with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
    threshold: f64,
}

impl PredictionSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        Self::with_threshold(scores, labels, DEFAULT_THRESHOLD)
    }

    pub fn with_threshold(scores: Vec<f64>, labels: Vec<u8>, threshold: f64) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyScores);
        }
        if scores.len() != labels.len() {
            return Err(Error::Metrics(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Metrics(format!("score {s} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Metrics(format!("label {l} is not 0 or 1")));
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Metrics(format!("threshold {threshold} outside [0, 1]")));
        }
        Ok(PredictionSet {
            scores,
            labels,
            threshold,
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Predicted class: 1 iff `score ≥ threshold`.
    pub fn predicted(&self) -> impl Iterator<Item = u8> + '_ {
        self.scores.iter().map(|&s| u8::from(s >= self.threshold))
    }

    /// Score for "sample belongs to `class`": `s` for class 1, `1 − s` for class 0.
    pub fn class_scores(&self, class: usize) -> Vec<f64> {
        self.scores
            .iter()
            .map(|&s| if class == 1 { s } else { 1.0 - s })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [ClassCounts; NUM_CLASSES],
    pub weights: [f64; NUM_CLASSES],
}

pub fn confusion(p: &PredictionSet) -> Confusion {
    let mut counts = [ClassCounts::default(); NUM_CLASSES];
    let mut support = [0usize; NUM_CLASSES];
    for (pred, &label) in p.predicted().zip(&p.labels) {
        support[label as usize] += 1;
        for (c, k) in counts.iter_mut().enumerate() {
            match (pred as usize == c, label as usize == c) {
                (true, true) => k.tp += 1,
                (true, false) => k.fp += 1,
                (false, true) => k.fn_ += 1,
                (false, false) => k.tn += 1,
            }
        }
    }
    let n = p.len() as f64;
    Confusion {
        counts,
        weights: support.map(|s| s as f64 / n),
    }
}

fn ratio(num: usize, den: usize, what: &str, class: usize, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(format!("{what}_class{class}_undefined"));
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weighted {
    pub pre: f64,
    pub rec: f64,
    pub spec: f64,
    pub f1: f64,
    pub flags: Vec<String>,
}

pub fn weighted_metrics(c: &Confusion) -> Weighted {
    let mut flags = Vec::new();
    let (mut pre, mut rec, mut spec, mut f1) = (0.0, 0.0, 0.0, 0.0);
    for (class, (k, &w)) in c.counts.iter().zip(&c.weights).enumerate() {
        let p = ratio(k.tp, k.tp + k.fp, "precision", class, &mut flags);
        let r = ratio(k.tp, k.tp + k.fn_, "recall", class, &mut flags);
        let s = ratio(k.tn, k.tn + k.fp, "specificity", class, &mut flags);
        let f = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            flags.push(format!("f1_class{class}_undefined"));
            0.0
        };
        pre += w * p;
        rec += w * r;
        spec += w * s;
        f1 += w * f;
    }
    Weighted {
        pre,
        rec,
        spec,
        f1,
        flags,
    }
}

/// `Σ_c (TP_c + TN_c) / Σ_c (TP_c + TN_c + FP_c + FN_c)`.
pub fn accuracy(c: &Confusion) -> f64 {
    let hit: usize = c.counts.iter().map(|k| k.tp + k.tn).sum();
    let all: usize = c.counts.iter().map(ClassCounts::total).sum();
    hit as f64 / all as f64
}

/// Unweighted mean of per-class recall.
pub fn balanced_accuracy(c: &Confusion) -> f64 {
    let mut flags = Vec::new();
    c.counts
        .iter()
        .enumerate()
        .map(|(class, k)| ratio(k.tp, k.tp + k.fn_, "recall", class, &mut flags))
        .sum::<f64>()
        / NUM_CLASSES as f64
}

/// Groups of tied scores in descending order, as (positives, negatives).
fn tie_groups(scores: &[f64], positive: &[bool]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut last = None;
    for i in order {
        if last != Some(scores[i]) {
            groups.push((0, 0));
            last = Some(scores[i]);
        }
        let g = groups.last_mut().expect("group was pushed");
        if positive[i] {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

fn class_counts(positive: &[bool]) -> Result<(usize, usize)> {
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::Metrics("curve metrics need both labels present".into()));
    }
    Ok((p, n))
}

/// Trapezoidal ROC area over the threshold sweep; tied scores move the curve
/// diagonally, which gives half credit to tied pairs.
pub fn roc_auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let (p, n) = class_counts(positive)?;
    let (mut tp, mut fp, mut area) = (0usize, 0usize, 0.0);
    for (gp, gn) in tie_groups(scores, positive) {
        let (tpr0, fpr0) = (tp as f64 / p as f64, fp as f64 / n as f64);
        tp += gp;
        fp += gn;
        let (tpr1, fpr1) = (tp as f64 / p as f64, fp as f64 / n as f64);
        area += (fpr1 - fpr0) * (tpr0 + tpr1) / 2.0;
    }
    Ok(area)
}

/// Step-wise precision–recall area (average precision) with tied scores
/// admitted together.
pub fn pr_auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let (p, _) = class_counts(positive)?;
    let (mut tp, mut fp, mut area) = (0usize, 0usize, 0.0);
    for (gp, gn) in tie_groups(scores, positive) {
        tp += gp;
        fp += gn;
        if gp > 0 {
            area += (gp as f64 / p as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(area)
}

fn weighted_curve(p: &PredictionSet, f: fn(&[f64], &[bool]) -> Result<f64>) -> Result<f64> {
    let c = confusion(p);
    let mut total = 0.0;
    for class in 0..NUM_CLASSES {
        let positive: Vec<bool> = p.labels.iter().map(|&l| l as usize == class).collect();
        total += c.weights[class] * f(&p.class_scores(class), &positive)?;
    }
    Ok(total)
}

/// `Σ_c w_c · ROC-AUC_c`.
pub fn roc_auc(p: &PredictionSet) -> Result<f64> {
    weighted_curve(p, roc_auc_binary)
}

/// `Σ_c w_c · PR-AUC_c`.
pub fn pr_auc(p: &PredictionSet) -> Result<f64> {
    weighted_curve(p, pr_auc_binary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub threshold: f64,
    pub counts: [ClassCounts; NUM_CLASSES],
    pub weights: [f64; NUM_CLASSES],
    pub acc: f64,
    /// Standard deviation of the per-sample 0/1 correctness indicator.
    pub acc_std: f64,
    pub bacc: f64,
    pub pre: f64,
    pub rec: f64,
    pub spec: f64,
    pub f1: f64,
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub flags: Vec<String>,
}

pub const CSV_COLUMNS: [&str; 10] = [
    "n", "acc", "acc_std", "bacc", "pre", "rec", "spec", "f1", "roc_auc", "pr_auc",
];

impl MetricsReport {
    pub fn values(&self) -> [f64; 9] {
        [
            self.acc,
            self.acc_std,
            self.bacc,
            self.pre,
            self.rec,
            self.spec,
            self.f1,
            self.roc_auc,
            self.pr_auc,
        ]
    }

    /// One CSV row in [`CSV_COLUMNS`] order.
    pub fn csv_row(&self) -> Vec<String> {
        std::iter::once(self.n.to_string())
            .chain(self.values().iter().map(|v| format!("{v:.6}")))
            .collect()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(CSV_COLUMNS)?;
        w.write_record(self.csv_row())?;
        w.flush()?;
        Ok(())
    }
}

pub fn evaluate(p: &PredictionSet) -> Result<MetricsReport> {
    let c = confusion(p);
    let w = weighted_metrics(&c);
    let acc = accuracy(&c);
    Ok(MetricsReport {
        n: p.len(),
        threshold: p.threshold,
        counts: c.counts,
        weights: c.weights,
        acc,
        acc_std: (acc * (1.0 - acc)).max(0.0).sqrt(),
        bacc: balanced_accuracy(&c),
        pre: w.pre,
        rec: w.rec,
        spec: w.spec,
        f1: w.f1,
        roc_auc: roc_auc(p)?,
        pr_auc: pr_auc(p)?,
        flags: w.flags,
    })
}

/// One row of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub source_id: String,
    pub label: u8,
    pub score: f64,
}

pub fn write_predictions(rows: &[PredictionRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn prediction_set(rows: &[PredictionRow], threshold: f64) -> Result<PredictionSet> {
    PredictionSet::with_threshold(
        rows.iter().map(|r| r.score).collect(),
        rows.iter().map(|r| r.label).collect(),
        threshold,
    )
}
