//! Evaluation metrics and the numeric half of a run report.

use crate::error::{Error, Result};
use crate::objectives::SegTarget;
use crate::tensor::counters::Counters;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Dice similarity coefficient of a probability map against binary masks.
/// Predictions binarize at 0.5; both-empty counts as a perfect 1.0.
pub fn evaluate_dsc<T: Scalar>(probs: &Tensor<T>, target: &SegTarget<T>) -> Result<f64> {
    let masks = target.masks();
    if probs.shape() != masks.shape() {
        return Err(Error::shape(
            "evaluate_dsc",
            format!("probs {:?} vs masks {:?}", probs.shape(), masks.shape()),
        ));
    }
    let mut inter = 0u64;
    let mut pred = 0u64;
    let mut truth = 0u64;
    for (p, s) in probs.data().iter().zip(masks.data()) {
        let p = p.to_f64_lossy() >= 0.5;
        let s = s.to_f64_lossy() == 1.0;
        inter += (p && s) as u64;
        pred += p as u64;
        truth += s as u64;
    }
    if pred + truth == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (pred + truth) as f64)
}

/// Index of the largest logit; ties break toward the lower index.
pub fn argmax<T: Scalar>(logits: &Tensor<T>) -> Result<usize> {
    if logits.shape().len() != 1 || logits.is_empty() {
        return Err(Error::shape("argmax", format!("want nonempty rank-1, got {:?}", logits.shape())));
    }
    let mut best = 0;
    for (i, v) in logits.data().iter().enumerate() {
        if v.to_f64_lossy() > logits.data()[best].to_f64_lossy() {
            best = i;
        }
    }
    Ok(best)
}

pub fn evaluate_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::invalid(
            "evaluate_accuracy",
            format!("{} predictions vs {} labels", predictions.len(), labels.len()),
        ));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Wall-clock phase breakdown. Excluded from any report-equality contract:
/// two identical runs match on every other field but not on timing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub warmup_seconds: f64,
    pub joint_seconds: f64,
    pub eval_seconds: f64,
}

/// Numeric outcome of a run: per-task scores keyed "task0", "task1", ...,
/// their macro average, and parameter counts before and after fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_task: BTreeMap<String, f64>,
    pub macro_avg: f64,
    pub params_train: usize,
    pub params_fused: usize,
    pub params_fused_per_task: Vec<usize>,
    pub counters: Counters,
    pub timing: Timing,
}

impl MetricsReport {
    pub fn new(
        scores: &[f64],
        params_train: usize,
        params_fused_per_task: Vec<usize>,
        counters: Counters,
        timing: Timing,
    ) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("metrics_report", "no per-task scores".to_string()));
        }
        let per_task: BTreeMap<String, f64> =
            scores.iter().enumerate().map(|(t, s)| (format!("task{t}"), *s)).collect();
        let macro_avg = scores.iter().sum::<f64>() / scores.len() as f64;
        Ok(MetricsReport {
            per_task,
            macro_avg,
            params_train,
            params_fused: params_fused_per_task.iter().sum(),
            params_fused_per_task,
            counters,
            timing,
        })
    }

    /// macro_avg must always be recomputable from per_task.
    pub fn check_consistent(&self) -> Result<()> {
        let mean = self.per_task.values().sum::<f64>() / self.per_task.len() as f64;
        if (mean - self.macro_avg).abs() > 1e-12 {
            return Err(Error::invalid(
                "metrics_report",
                format!("macro_avg {} disagrees with per-task mean {}", self.macro_avg, mean),
            ));
        }
        Ok(())
    }
}
