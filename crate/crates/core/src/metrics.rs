//! Classification metrics and the evaluation report.
//!
//! Ties are resolved the same way everywhere: half credit in AUC-ROC,
//! block-wise in AUC-PR, lowest index in arg-max.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Prediction, PreparedWindow, Target, Task};

fn undefined(metric: &'static str, detail: impl Into<String>) -> Error {
    Error::UndefinedMetric {
        metric,
        detail: detail.into(),
    }
}

fn check_binary(metric: &'static str, scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(undefined(
            metric,
            format!("{} scores but {} labels", scores.len(), labels.len()),
        ));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(undefined(metric, format!("score {s}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(undefined(metric, format!("label {l} is not 0/1")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score, grouped into blocks of equal score.
fn tie_blocks(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match blocks.last_mut() {
            Some(b) if scores[b[0]] == scores[i] => b.push(i),
            _ => blocks.push(vec![i]),
        }
    }
    blocks
}

/// Mann-Whitney estimate of P(score+ > score-), ties counting one half.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_binary("auc_roc", scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(undefined("auc_roc", "needs both classes"));
    }
    // Walk blocks from the top; each positive beats every negative below it.
    let mut neg_above = 0usize;
    let mut credit = 0.0;
    for block in tie_blocks(scores) {
        let bp = block.iter().filter(|&&i| labels[i] == 1).count();
        let bn = block.len() - bp;
        let neg_below = neg - neg_above - bn;
        credit += bp as f64 * (neg_below as f64 + 0.5 * bn as f64);
        neg_above += bn;
    }
    Ok(credit / (pos as f64 * neg as f64))
}

/// Average precision: sum over score blocks of precision times recall gain.
pub fn auc_pr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_binary("auc_pr", scores, labels)?;
    if pos == 0 {
        return Err(undefined("auc_pr", "no positive labels"));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    for block in tie_blocks(scores) {
        let bp = block.iter().filter(|&&i| labels[i] == 1).count();
        tp += bp;
        seen += block.len();
        if bp > 0 {
            ap += (tp as f64 / seen as f64) * (bp as f64 / pos as f64);
        }
    }
    Ok(ap)
}

/// Binary accuracy; a score at or above `cutoff` predicts class 1.
pub fn accuracy_binary(scores: &[f64], labels: &[u8], cutoff: f64) -> Result<f64> {
    check_binary("accuracy", scores, labels)?;
    if scores.is_empty() {
        return Err(undefined("accuracy", "no samples"));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= cutoff) == (l == 1))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Arg-max, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    (0..xs.len()).fold(0, |best, i| if xs[i] > xs[best] { i } else { best })
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(undefined("accuracy", format!("{} predictions but {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(undefined("accuracy", "no samples"));
    }
    Ok(pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub value: f64,
    /// Set when chance agreement is 1 and the ratio is undefined.
    pub degenerate: bool,
}

pub fn cohen_kappa(pred: &[usize], truth: &[usize]) -> Result<Kappa> {
    if pred.len() != truth.len() {
        return Err(undefined("cohen_kappa", format!("{} predictions but {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(undefined("cohen_kappa", "no samples"));
    }
    let n_classes = pred.iter().chain(truth).max().map_or(0, |m| m + 1);
    let cm = ConfusionMatrix::new(pred, truth, n_classes)?;
    let n = pred.len() as f64;
    let p_o = (0..n_classes).map(|c| cm.counts[c][c]).sum::<u64>() as f64 / n;
    let p_e: f64 = (0..n_classes)
        .map(|c| cm.row_total(c) as f64 * cm.col_total(c) as f64)
        .sum::<f64>()
        / (n * n);
    if p_e >= 1.0 {
        return Ok(Kappa {
            value: if p_o >= 1.0 { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    Ok(Kappa {
        value: (p_o - p_e) / (1.0 - p_e),
        degenerate: false,
    })
}

/// `counts[true][pred]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(undefined("confusion_matrix", "length mismatch"));
        }
        let mut counts = vec![vec![0u64; n_classes]; n_classes];
        for (&p, &t) in pred.iter().zip(truth) {
            if p >= n_classes || t >= n_classes {
                return Err(Error::Index {
                    what: "confusion matrix class",
                    index: p.max(t),
                    size: n_classes,
                });
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_total(&self, r: usize) -> u64 {
        self.counts[r].iter().sum()
    }

    pub fn col_total(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }

    /// Each row divided by its total; empty rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let t: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if t == 0 { 0.0 } else { c as f64 / t as f64 })
                    .collect()
            })
            .collect()
    }

    /// Header `true\pred,1,..,n`, then one row per true class. Classes are
    /// printed 1-based.
    pub fn to_csv(&self) -> String {
        let n = self.n_classes();
        let mut s = String::from("true\\pred");
        for c in 1..=n {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (r, row) in self.counts.iter().enumerate() {
            let _ = write!(s, "{}", r + 1);
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc_roc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc_pr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kappa: Option<Kappa>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub confusion: Option<ConfusionMatrix>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mae: Option<f64>,
    /// Metrics that could not be computed, with the reason.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub undefined: Vec<String>,
}

impl EvalReport {
    fn empty(task: Task, n: usize) -> Self {
        EvalReport {
            task,
            n,
            auc_roc: None,
            auc_pr: None,
            accuracy: None,
            kappa: None,
            confusion: None,
            mse: None,
            mae: None,
            undefined: Vec::new(),
        }
    }

    /// Metrics a single-class or otherwise degenerate sample cannot support
    /// are left out and listed in `undefined`.
    pub fn binary(scores: &[f64], labels: &[u8]) -> Result<Self> {
        let mut r = Self::empty(Task::Decomp, scores.len());
        r.accuracy = Some(accuracy_binary(scores, labels, 0.5)?);
        match auc_roc(scores, labels) {
            Ok(v) => r.auc_roc = Some(v),
            Err(e) => r.undefined.push(e.to_string()),
        }
        match auc_pr(scores, labels) {
            Ok(v) => r.auc_pr = Some(v),
            Err(e) => r.undefined.push(e.to_string()),
        }
        Ok(r)
    }

    pub fn multiclass(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<Self> {
        let mut r = Self::empty(Task::Los, pred.len());
        r.accuracy = Some(accuracy(pred, truth)?);
        r.kappa = Some(cohen_kappa(pred, truth)?);
        r.confusion = Some(ConfusionMatrix::new(pred, truth, n_classes)?);
        Ok(r)
    }

    pub fn regression(pred: &[f64], truth: &[f64]) -> Result<Self> {
        if pred.len() != truth.len() || pred.is_empty() {
            return Err(undefined("mse", "needs matching, non-empty inputs"));
        }
        let n = pred.len() as f64;
        let mut r = Self::empty(Task::LosDays, pred.len());
        r.mse = Some(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n);
        r.mae = Some(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n);
        Ok(r)
    }

    /// Scores the final-step output of each window against its label.
    pub fn from_predictions(task: Task, preds: &[Prediction], windows: &[PreparedWindow]) -> Result<Self> {
        if preds.len() != windows.len() {
            return Err(Error::Contract(format!(
                "{} predictions for {} windows",
                preds.len(),
                windows.len()
            )));
        }
        match task {
            Task::Decomp => {
                let scores: Vec<f64> = preds.iter().map(Prediction::score).collect();
                let labels: Vec<u8> = windows.iter().map(|w| w.decomp).collect();
                Self::binary(&scores, &labels)
            }
            Task::Los => {
                let pred: Vec<usize> = preds.iter().map(Prediction::class).collect();
                let truth: Vec<usize> = windows
                    .iter()
                    .map(|w| match w.target(task) {
                        Target::Class(c) => c,
                        Target::Value(_) => unreachable!("classification task"),
                    })
                    .collect();
                Self::multiclass(&pred, &truth, task.n_outputs())
            }
            Task::LosDays => {
                let pred: Vec<f64> = preds.iter().map(|p| p.last()[0]).collect();
                let truth: Vec<f64> = windows.iter().map(|w| w.los_days).collect();
                Self::regression(&pred, &truth)
            }
        }
    }
}

/// Quadratic-time reference implementations, written from the definitions
/// rather than the sweeps above.
pub mod oracle {
    /// Pair counting over every (positive, negative) pair.
    pub fn auc_roc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut credit, mut pairs) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        credit += 1.0;
                    } else if scores[i] == scores[j] {
                        credit += 0.5;
                    }
                }
            }
        }
        credit / pairs
    }

    /// Precision and recall at every distinct threshold, summed as a step
    /// function of recall.
    pub fn auc_pr(scores: &[f64], labels: &[u8]) -> f64 {
        let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for t in thresholds {
            let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
            let tp = selected.iter().filter(|&&i| labels[i] == 1).count() as f64;
            let precision = tp / selected.len() as f64;
            let recall = tp / pos;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        ap
    }

    pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
        let mut hits = 0.0;
        for i in 0..pred.len() {
            if pred[i] == truth[i] {
                hits += 1.0;
            }
        }
        hits / pred.len() as f64
    }

    /// Chance agreement as the fraction of all (i, j) pairs with
    /// `pred[i] == truth[j]`.
    pub fn cohen_kappa(pred: &[usize], truth: &[usize]) -> f64 {
        let n = pred.len() as f64;
        let p_o = accuracy(pred, truth);
        let mut matches = 0.0;
        for p in pred {
            for t in truth {
                if p == t {
                    matches += 1.0;
                }
            }
        }
        let p_e = matches / (n * n);
        if p_e == 1.0 {
            return if p_o == 1.0 { 1.0 } else { 0.0 };
        }
        (p_o - p_e) / (1.0 - p_e)
    }
}
