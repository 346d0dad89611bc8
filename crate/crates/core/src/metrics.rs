//! Accuracy, ROC AUC and per-epoch metric records.

use serde::Serialize;

use crate::error::{Error, Result};

/// Rank-based AUC: the probability that a random positive outscores a random
/// negative, with ties credited one half.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives, with tied groups sharing their mean rank.
    let mut rank_sum2 = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1; twice their mean is i + j + 2.
        let twice_mean = (i + j + 2) as u128;
        let positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank_sum2 += twice_mean * positives;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    // 2U = 2·R⁺ − P(P+1); counts of half-wins are integers after doubling.
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Fraction of predictions equal to the labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Binary confusion counts with label 1 as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub r#fn: usize,
}

impl Confusion {
    pub fn from_predictions(predictions: &[usize], labels: &[usize]) -> Self {
        let mut c = Self::default();
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p == 1, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.r#fn += 1,
            }
        }
        c
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss_ce: f64,
    pub loss_mse: f64,
    pub acc: f64,
    /// `None` when the split holds a single class.
    pub auc: Option<f64>,
}

pub const CSV_HEADER: &str = "epoch,split,loss_ce,loss_mse,acc,auc";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let auc = self.auc.map_or_else(|| "nan".to_string(), |a| format!("{a:.6}"));
        format!(
            "{},{},{:.6},{:.6},{:.6},{}",
            self.epoch, self.split, self.loss_ce, self.loss_mse, self.acc, auc
        )
    }
}

pub fn to_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Final evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub auc: Option<f64>,
    pub loss_ce: f64,
    pub loss_mse: f64,
    pub confusion: Confusion,
    /// Per-epoch history, empty for a pure evaluation.
    pub history: Vec<EpochMetrics>,
}
