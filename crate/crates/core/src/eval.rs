//! Per-level argmax prediction and accuracy metrics.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::taxonomy::{LabelChain, Taxonomy};
use crate::tensor::Tensor;

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (m, _) = logits.dims2().expect("logits are a matrix");
    (0..m)
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Predicted label chain per sample. Levels are predicted independently and
/// may disagree with the taxonomy.
pub fn predict_from_logits(logits: &[Tensor]) -> Vec<LabelChain> {
    let per_level: Vec<Vec<usize>> = logits.iter().map(argmax_rows).collect();
    let n = per_level.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| LabelChain(per_level.iter().map(|l| l[i]).collect()))
        .collect()
}

pub fn predict(params: &ParamSet, x: &Tensor) -> Result<Vec<LabelChain>> {
    Ok(predict_from_logits(&params.logits(x)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub per_level_acc: Vec<f64>,
    pub avg_acc: f64,
    pub consistency_rate: f64,
    pub n: usize,
}

impl Metrics {
    /// Metrics from per-level accuracies; `avg_acc` is their plain mean.
    pub fn from_level_accs(per_level_acc: Vec<f64>, consistency_rate: f64, n: usize) -> Self {
        let avg_acc = per_level_acc.iter().sum::<f64>() / per_level_acc.len() as f64;
        Metrics {
            per_level_acc,
            avg_acc,
            consistency_rate,
            n,
        }
    }

    /// `level,acc` rows followed by `avg_acc` and `consistency_rate` rows.
    /// Levels are one-based here.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,acc\n");
        for (k, acc) in self.per_level_acc.iter().enumerate() {
            out.push_str(&format!("{},{acc}\n", k + 1));
        }
        out.push_str(&format!("avg_acc,{}\n", self.avg_acc));
        out.push_str(&format!("consistency_rate,{}\n", self.consistency_rate));
        out
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, acc) in self.per_level_acc.iter().enumerate() {
            writeln!(f, "level {} acc: {:.2}%", k + 1, 100.0 * acc)?;
        }
        writeln!(f, "avg_acc: {:.2}%", 100.0 * self.avg_acc)?;
        writeln!(f, "consistency_rate: {:.2}%", 100.0 * self.consistency_rate)?;
        write!(f, "samples: {}", self.n)
    }
}

/// Fraction of predicted chains whose every link matches the taxonomy.
pub fn consistency_rate(preds: &[LabelChain], tax: &Taxonomy) -> Result<f64> {
    if preds.is_empty() {
        return Ok(1.0);
    }
    let mut ok = 0usize;
    for p in preds {
        if p.depth() != tax.depth() {
            return Err(Error::shape(
                "consistency_rate",
                format!("chain depth {} vs taxonomy depth {}", p.depth(), tax.depth()),
            ));
        }
        for (k, &i) in p.indices().iter().enumerate() {
            if i >= tax.level_size(k) {
                return Err(Error::OutOfRange {
                    what: "predicted category",
                    index: i,
                    limit: tax.level_size(k),
                });
            }
        }
        if tax.is_consistent(p) {
            ok += 1;
        }
    }
    Ok(ok as f64 / preds.len() as f64)
}

pub fn accuracy(preds: &[LabelChain], truth: &[LabelChain], tax: &Taxonomy) -> Result<Metrics> {
    if preds.len() != truth.len() {
        return Err(Error::shape(
            "accuracy",
            format!("{} predictions for {} samples", preds.len(), truth.len()),
        ));
    }
    if preds.is_empty() {
        return Err(Error::config("no samples to evaluate"));
    }
    let k = tax.depth();
    if preds.iter().chain(truth).any(|c| c.depth() != k) {
        return Err(Error::shape("accuracy", format!("chains must have depth {k}")));
    }
    let n = preds.len();
    let per_level = (0..k)
        .map(|level| {
            let hits = preds
                .iter()
                .zip(truth)
                .filter(|(p, t)| p.level(level) == t.level(level))
                .count();
            hits as f64 / n as f64
        })
        .collect();
    Ok(Metrics::from_level_accs(per_level, consistency_rate(preds, tax)?, n))
}
