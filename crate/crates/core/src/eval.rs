//! Time-series cross-validation and metric computation.
//!
//! Splits are expanding-window: records are ordered by submission date,
//! partitioned into `k + 1` chronological folds, and split `i` trains on
//! folds `1..=i` while testing on fold `i + 1`. Every training set is a
//! prefix of the next, and every train date strictly precedes every test
//! date. Classifier quality is summarized by the precision-recall curve
//! (recall at 95% precision and non-interpolated average precision);
//! day-count regression by mean absolute error against an average-of-train
//! baseline.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("split count must be at least 1")]
    InvalidSplitCount,
    #[error("need at least {needed} records for {splits} splits, got {got}")]
    NotEnoughRecords { needed: usize, splits: usize, got: usize },
    #[error("input lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("score at index {index} is not finite")]
    ScoreNotFinite { index: usize },
    #[error("precision-recall analysis needs at least one positive label")]
    NoPositives,
    #[error("empty input")]
    EmptyInput,
    #[error("baseline must be positive, got {0}")]
    NonPositiveBaseline(f64),
}

/// One expanding-window split. Indices refer to the caller's record slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CVSplit {
    /// 1-based split number; stable even when earlier splits collapse.
    pub index: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Chronological expanding-window splits over `dates`.
///
/// Records are sorted by date (ties keep input order), cut into `k + 1`
/// folds of near-equal size with any remainder going to the earliest
/// folds. A fold boundary that lands inside a run of equal dates slides
/// forward past the run so the whole run trains; a split whose test fold
/// is swallowed by such a slide is dropped.
pub fn time_series_splits(dates: &[NaiveDate], k: usize) -> Result<Vec<CVSplit>, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidSplitCount);
    }
    let n = dates.len();
    if n < k + 1 {
        return Err(EvalError::NotEnoughRecords { needed: k + 1, splits: k, got: n });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| dates[i]);

    let folds = k + 1;
    let base = n / folds;
    let remainder = n % folds;
    let mut boundaries = Vec::with_capacity(k);
    let mut cut = 0;
    for fold in 0..k {
        cut += base + usize::from(fold < remainder);
        let mut b = cut;
        while b < n && dates[order[b]] == dates[order[b - 1]] {
            b += 1;
        }
        boundaries.push(b);
    }

    let mut splits = Vec::with_capacity(k);
    for i in 0..k {
        let start = boundaries[i];
        let end = if i + 1 < k { boundaries[i + 1] } else { n };
        if start >= end {
            continue;
        }
        splits.push(CVSplit {
            index: i + 1,
            train: order[..start].to_vec(),
            test: order[start..end].to_vec(),
        });
    }
    Ok(splits)
}

/// One operating point of a precision-recall curve.
#[derive(Debug, Clone, PartialEq)]
pub struct PRPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Precision-recall curve with one point per distinct score, descending.
///
/// Each point classifies every record scoring at or above its threshold
/// as positive, so tied scores enter a point together.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PRPoint>, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch { left: scores.len(), right: labels.len() });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::ScoreNotFinite { index });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(EvalError::NoPositives);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut curve = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut at = 0usize;
    while at < order.len() {
        let threshold = scores[order[at]];
        while at < order.len() && scores[order[at]] == threshold {
            if labels[order[at]] {
                tp += 1;
            } else {
                fp += 1;
            }
            at += 1;
        }
        curve.push(PRPoint {
            threshold,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / positives as f64,
            true_positives: tp,
            false_positives: fp,
            false_negatives: positives - tp,
        });
    }
    Ok(curve)
}

/// Maximum recall among curve points whose precision meets `target`;
/// 0 when no point qualifies.
pub fn recall_at_precision(curve: &[PRPoint], target: f64) -> f64 {
    curve
        .iter()
        .filter(|p| p.precision >= target)
        .map(|p| p.recall)
        .fold(0.0, f64::max)
}

/// Non-interpolated average precision: sum of precision weighted by
/// recall increments along the descending-threshold curve.
pub fn pr_auc(curve: &[PRPoint]) -> Result<f64, EvalError> {
    if curve.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut auc = 0.0;
    let mut prev_recall = 0.0;
    for p in curve {
        auc += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
    }
    Ok(auc)
}

/// Mean absolute error between predictions and ground truth.
pub fn mae(preds: &[f64], truths: &[f64]) -> Result<f64, EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch { left: preds.len(), right: truths.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let total: f64 = preds.iter().zip(truths).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / preds.len() as f64)
}

/// MAE of the constant predictor that always answers the train-set mean.
pub fn average_baseline_mae(train_truths: &[f64], test_truths: &[f64]) -> Result<f64, EvalError> {
    if train_truths.is_empty() || test_truths.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mean = train_truths.iter().sum::<f64>() / train_truths.len() as f64;
    let preds = vec![mean; test_truths.len()];
    mae(&preds, test_truths)
}

/// Percent improvement of `candidate` over a positive `baseline`.
pub fn relative_gain(candidate: f64, baseline: f64) -> Result<f64, EvalError> {
    if !(baseline > 0.0) {
        return Err(EvalError::NonPositiveBaseline(baseline));
    }
    Ok(100.0 * (candidate - baseline) / baseline)
}

/// Metrics computed on one split's test fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: usize,
    pub recall_at_95: f64,
    pub pr_auc: f64,
    pub mae: f64,
    pub denial_base_rate: f64,
    pub test_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub mean: f64,
    pub sd: f64,
}

/// Per-split metrics plus mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub splits: Vec<SplitMetrics>,
    pub recall_at_95: MetricsSummary,
    pub pr_auc: MetricsSummary,
    pub mae: MetricsSummary,
    pub denial_base_rate: MetricsSummary,
}

fn mean_sd(values: &[f64]) -> MetricsSummary {
    if values.is_empty() {
        return MetricsSummary { mean: f64::NAN, sd: f64::NAN };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1.0)).sqrt()
    };
    MetricsSummary { mean, sd }
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "model,split,recall95,pr_auc,mae";

    pub fn from_splits(model: impl Into<String>, splits: Vec<SplitMetrics>) -> Self {
        let pick = |f: fn(&SplitMetrics) -> f64| -> MetricsSummary {
            let values: Vec<f64> = splits.iter().map(f).collect();
            mean_sd(&values)
        };
        let recall_at_95 = pick(|s| s.recall_at_95);
        let pr_auc = pick(|s| s.pr_auc);
        let mae = pick(|s| s.mae);
        let denial_base_rate = pick(|s| s.denial_base_rate);
        MetricsReport {
            model: model.into(),
            splits,
            recall_at_95,
            pr_auc,
            mae,
            denial_base_rate,
        }
    }

    /// Data rows for the metrics CSV: one per split, then mean and sd.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows: Vec<String> = self
            .splits
            .iter()
            .map(|s| {
                format!("{},{},{},{},{}", self.model, s.split, s.recall_at_95, s.pr_auc, s.mae)
            })
            .collect();
        rows.push(format!(
            "{},mean,{},{},{}",
            self.model, self.recall_at_95.mean, self.pr_auc.mean, self.mae.mean
        ));
        rows.push(format!(
            "{},sd,{},{},{}",
            self.model, self.recall_at_95.sd, self.pr_auc.sd, self.mae.sd
        ));
        rows
    }
}
