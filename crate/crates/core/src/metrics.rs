//! Regression and classification metrics for sentiment scores in [-3, 3].
//!
//! Binary metrics come in two conventions: `incl_zero` treats scores >= 0
//! as positive over every sample; `excl_zero` drops samples whose label is
//! exactly 0 and treats scores > 0 as positive. F1 is support-weighted over
//! the two classes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CSV column order of [`EvalReport::csv_row`].
pub const CSV_COLUMNS: [&str; 8] = ["n_samples", "mae", "corr", "acc7", "acc2_incl_zero", "acc2_excl_zero", "f1_incl_zero", "f1_excl_zero"];

/// Metric values for one prediction set. `None` marks an undefined value:
/// correlation with zero variance, or zero-excluded metrics when every
/// label is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub n_samples: usize,
    pub mae: f64,
    pub corr: Option<f64>,
    pub acc7: f64,
    pub acc2_incl_zero: f64,
    pub acc2_excl_zero: Option<f64>,
    pub f1_incl_zero: f64,
    pub f1_excl_zero: Option<f64>,
}

impl EvalReport {
    /// Values in [`CSV_COLUMNS`] order; undefined values are empty cells.
    pub fn csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.n_samples.to_string(),
            self.mae.to_string(),
            opt(self.corr),
            self.acc7.to_string(),
            self.acc2_incl_zero.to_string(),
            opt(self.acc2_excl_zero),
            self.f1_incl_zero.to_string(),
            opt(self.f1_excl_zero),
        ]
    }

    /// Metric name to value, skipping undefined values.
    pub fn values(&self) -> BTreeMap<&'static str, f64> {
        let mut m = BTreeMap::new();
        m.insert("mae", self.mae);
        m.insert("acc7", self.acc7);
        m.insert("acc2_incl_zero", self.acc2_incl_zero);
        m.insert("f1_incl_zero", self.f1_incl_zero);
        for (k, v) in [("corr", self.corr), ("acc2_excl_zero", self.acc2_excl_zero), ("f1_excl_zero", self.f1_excl_zero)] {
            if let Some(v) = v {
                m.insert(k, v);
            }
        }
        m
    }
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn sentiment_class(v: f64) -> i64 {
    v.clamp(-3.0, 3.0).round() as i64
}

/// Support-weighted F1 over the classes present in `truth`.
pub fn weighted_f1(pred: &[bool], truth: &[bool]) -> f64 {
    let n = truth.len() as f64;
    let mut total = 0.0;
    for class in [false, true] {
        let support = truth.iter().filter(|&&t| t == class).count();
        if support == 0 {
            continue;
        }
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fneg = 0usize;
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == class, t == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fneg;
        let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        total += f1 * support as f64 / n;
    }
    total
}

fn accuracy(pred: &[bool], truth: &[bool]) -> f64 {
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

pub fn evaluate(preds: &[f64], labels: &[f64]) -> Result<EvalReport> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, found: preds.len() });
    }
    if preds.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("predictions and labels must be finite".into()));
    }
    let n = preds.len();
    let mae = preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / n as f64;
    let acc7 = preds.iter().zip(labels).filter(|(p, y)| sentiment_class(**p) == sentiment_class(**y)).count() as f64 / n as f64;

    let pred_nonneg: Vec<bool> = preds.iter().map(|&p| p >= 0.0).collect();
    let label_nonneg: Vec<bool> = labels.iter().map(|&y| y >= 0.0).collect();

    let kept: Vec<usize> = (0..n).filter(|&i| labels[i] != 0.0).collect();
    let (acc2_excl_zero, f1_excl_zero) = if kept.is_empty() {
        (None, None)
    } else {
        let p: Vec<bool> = kept.iter().map(|&i| preds[i] > 0.0).collect();
        let t: Vec<bool> = kept.iter().map(|&i| labels[i] > 0.0).collect();
        (Some(accuracy(&p, &t)), Some(weighted_f1(&p, &t)))
    };

    Ok(EvalReport {
        n_samples: n,
        mae,
        corr: pearson(preds, labels),
        acc7,
        acc2_incl_zero: accuracy(&pred_nonneg, &label_nonneg),
        acc2_excl_zero,
        f1_incl_zero: weighted_f1(&pred_nonneg, &label_nonneg),
        f1_excl_zero,
    })
}

/// Mean and population standard deviation of one metric across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    /// Runs where the metric was defined.
    pub runs: usize,
}

/// Per-metric mean and std over several reports. Metrics undefined in
/// every report are omitted.
pub fn summarize_runs(reports: &[EvalReport]) -> Result<BTreeMap<String, MetricSummary>> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to summarize".into()));
    }
    let mut columns: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (k, v) in r.values() {
            columns.entry(k).or_default().push(v);
        }
    }
    Ok(columns
        .into_iter()
        .map(|(k, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            (k.to_string(), MetricSummary { mean, std: var.sqrt(), runs: v.len() })
        })
        .collect())
}
