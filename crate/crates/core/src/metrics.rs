//! Confusion matrices, macro-F1 and seed aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{data_err, Result};
use crate::models::{self, ModelBundle};
use crate::tensor::Tensor;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix { n_classes, counts: vec![0; n_classes * n_classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(data_err("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix { n_classes: n, counts: rows.concat() })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(data_err(format!("{} labels vs {} predictions", truth.len(), predicted.len())));
        }
        let mut cm = ConfusionMatrix::new(n_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.n_classes || predicted >= self.n_classes {
            return Err(data_err(format!("class pair ({truth}, {predicted}) outside {} classes", self.n_classes)));
        }
        self.counts[truth * self.n_classes + predicted] += 1;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.n_classes).map(|p| self.get(c, p)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.n_classes).map(|t| self.get(t, c)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.n_classes).map(|c| self.get(c, c)).sum();
        correct as f64 / self.total().max(1) as f64
    }

    /// F1 per class; `None` for classes that never occur as a true label.
    /// Zero-denominator precision or recall counts as 0.
    pub fn per_class_f1(&self) -> Vec<Option<f64>> {
        (0..self.n_classes)
            .map(|c| {
                let support = self.row_sum(c);
                if support == 0 {
                    return None;
                }
                let tp = self.get(c, c) as f64;
                let ratio = |den: u64| if den == 0 { 0.0 } else { tp / den as f64 };
                let (precision, recall) = (ratio(self.col_sum(c)), ratio(support));
                Some(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) })
            })
            .collect()
    }
}

/// Unweighted mean of per-class F1 over classes present in the true labels.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(data_err("macro F1 of an empty confusion matrix"));
    }
    let present: Vec<f64> = cm.per_class_f1().into_iter().flatten().collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(c)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}

pub fn predict(bundle: &ModelBundle, windows: &[Tensor]) -> Result<Vec<usize>> {
    if bundle.n_classes().is_none() {
        return Err(data_err("model has no trained classifier"));
    }
    Ok(argmax_rows(&models::logits(&bundle.params, &bundle.encoder, windows)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub macro_f1: f64,
    pub per_class_f1: Vec<Option<f64>>,
    pub accuracy: f64,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricReport {
    pub fn from_confusion(cm: &ConfusionMatrix, seed: u64, config_hash: impl Into<String>) -> Result<Self> {
        Ok(MetricReport {
            macro_f1: macro_f1(cm)?,
            per_class_f1: cm.per_class_f1(),
            accuracy: cm.accuracy(),
            n: cm.total() as usize,
            seed,
            config_hash: config_hash.into(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; absent for a single value.
    pub std: Option<f64>,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(data_err("nothing to aggregate"));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Ok(Summary { mean, std, n })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub macro_f1: Summary,
    pub accuracy: Summary,
}

pub fn aggregate_reports(reports: &[MetricReport]) -> Result<ReportSummary> {
    let f1: Vec<f64> = reports.iter().map(|r| r.macro_f1).collect();
    let acc: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    Ok(ReportSummary { macro_f1: aggregate(&f1)?, accuracy: aggregate(&acc)? })
}
