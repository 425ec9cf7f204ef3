use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::global::GlobalModel;
use crate::model::{LossKind, LossSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: Split,
    pub loss: f64,
    /// `None` for regression.
    pub accuracy: Option<f64>,
    /// Binary tasks only.
    pub f1: Option<f64>,
    /// Multiclass only.
    pub top_k_accuracy: Option<f64>,
    pub top_k: Option<usize>,
    pub samples: usize,
}

/// Loss and classification metrics of the assembled model. Binary
/// decisions are `logit >= 0`; multiclass takes the argmax with ties going
/// to the lowest class index.
pub fn evaluate(model: &GlobalModel, dataset: &Dataset, split: Split, loss: &LossSpec, top_k: usize) -> Result<MetricReport> {
    let z = model.embedding_sum(&dataset.features)?;
    let value = crate::model::composite_loss(&z, &dataset.labels, loss)?;
    let n = dataset.num_samples();
    let mut report = MetricReport {
        split,
        loss: value,
        accuracy: None,
        f1: None,
        top_k_accuracy: None,
        top_k: None,
        samples: n,
    };
    match loss.kind {
        LossKind::SquaredError => {}
        LossKind::BinaryCrossEntropyWithLogit => {
            let preds: Vec<bool> = (0..n).map(|i| z.get(i, 0) >= 0.0).collect();
            let truth: Vec<bool> = dataset.labels.iter().map(|&y| y == 1.0).collect();
            report.accuracy = Some(accuracy(&preds, &truth));
            report.f1 = Some(f1_score(&preds, &truth));
        }
        LossKind::SoftmaxCrossEntropy => {
            let mut correct = 0usize;
            let mut in_top = 0usize;
            for (i, &y) in dataset.labels.iter().enumerate() {
                let ranked = rank_classes(z.row(i));
                let y = y as usize;
                correct += usize::from(ranked[0] == y);
                in_top += usize::from(ranked.iter().take(top_k).any(|&c| c == y));
            }
            report.accuracy = Some(correct as f64 / n as f64);
            report.top_k_accuracy = Some(in_top as f64 / n as f64);
            report.top_k = Some(top_k);
        }
    }
    Ok(report)
}

/// Class indices by descending score; equal scores keep ascending index.
fn rank_classes(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

pub fn accuracy(preds: &[bool], truth: &[bool]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / preds.len() as f64
}

/// F1 on the positive class; 0 when precision + recall is 0 or undefined.
pub fn f1_score(preds: &[bool], truth: &[bool]) -> f64 {
    let tp = preds.iter().zip(truth).filter(|(&p, &t)| p && t).count() as f64;
    let fp = preds.iter().zip(truth).filter(|(&p, &t)| p && !t).count() as f64;
    let fneg = preds.iter().zip(truth).filter(|(&p, &t)| !p && t).count() as f64;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}
