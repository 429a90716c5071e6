//! Confusion-matrix metrics and top-k accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Rows are actual classes, columns predicted.
    pub confusion_matrix: Vec<Vec<u64>>,
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: Averages,
    pub micro: Averages,
    pub accuracy: f64,
    /// Keyed by `k`.
    pub top_k: BTreeMap<String, f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn compute_metrics(preds: &[usize], labels: &[usize], classes: usize) -> Result<MetricsReport> {
    if preds.len() != labels.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::arg("metrics need at least one sample"));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&i| i >= classes) {
        return Err(Error::arg(format!("class index {bad} out of range for {classes} classes")));
    }
    let mut cm = vec![vec![0u64; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        cm[l][p] += 1;
    }
    let total = preds.len() as u64;
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| {
            let tp = cm[c][c];
            let row: u64 = cm[c].iter().sum();
            let col: u64 = cm.iter().map(|r| r[c]).sum();
            let (fp, fn_) = (col - tp, row - tp);
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            ClassMetrics {
                tp,
                fp,
                fn_,
                tn: total - tp - fp - fn_,
                precision,
                recall,
                f1: f1(precision, recall),
            }
        })
        .collect();
    let n = classes as f64;
    let macro_avg = Averages {
        precision: per_class.iter().map(|m| m.precision).sum::<f64>() / n,
        recall: per_class.iter().map(|m| m.recall).sum::<f64>() / n,
        f1: per_class.iter().map(|m| m.f1).sum::<f64>() / n,
    };
    let tp: u64 = per_class.iter().map(|m| m.tp).sum();
    let fp: u64 = per_class.iter().map(|m| m.fp).sum();
    let fn_: u64 = per_class.iter().map(|m| m.fn_).sum();
    let (mp, mr) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
    Ok(MetricsReport {
        confusion_matrix: cm,
        per_class,
        macro_avg,
        micro: Averages {
            precision: mp,
            recall: mr,
            f1: f1(mp, mr),
        },
        accuracy: ratio(tp, total),
        top_k: BTreeMap::new(),
    })
}

/// Fraction of rows whose label lies among the `k` largest entries; ties go
/// to the lower index.
pub fn top_k_accuracy(rows: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if rows.len() != labels.len() || rows.is_empty() {
        return Err(Error::arg(format!(
            "{} probability rows for {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let n = rows[0].len();
    if k == 0 || k > n {
        return Err(Error::arg(format!("k={k} outside [1, {n}]")));
    }
    let mut hits = 0usize;
    for (row, &label) in rows.iter().zip(labels) {
        if row.len() != n || label >= n {
            return Err(Error::arg("ragged probability rows or label out of range"));
        }
        // rank of the label = entries that beat it under (value desc, index asc)
        let p = row[label];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(i, &v)| v > p || (v == p && i < label))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows.len() as f64)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl MetricsReport {
    /// Adds top-k accuracies for every `k` in `ks` that fits the class count.
    pub fn with_top_k(mut self, rows: &[Vec<f64>], labels: &[usize], ks: &[usize]) -> Result<Self> {
        for &k in ks {
            if k <= self.confusion_matrix.len() {
                self.top_k.insert(k.to_string(), top_k_accuracy(rows, labels, k)?);
            }
        }
        Ok(self)
    }

    /// JSON document with keys `confusion_matrix`, `per_class`, `macro`,
    /// `micro`, `accuracy` and `top_k`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("metrics serialize")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        Ok(serde_json::from_value(v.clone())?)
    }
}
