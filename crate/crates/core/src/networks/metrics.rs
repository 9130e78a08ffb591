use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confusion-matrix summary. `confusion[t][p]` counts points of true class
/// `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: Vec<Vec<u64>>,
    /// `None` for classes absent from both truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub macc: f64,
    pub oacc: f64,
}

pub fn confusion_matrix(pred: &[u16], truth: &[u16], num_classes: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != truth.len() {
        return Err(Error::dimension(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let mut cm = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p as usize >= num_classes || t as usize >= num_classes {
            return Err(Error::contract(format!("label pair ({t}, {p}) outside {num_classes} classes")));
        }
        cm[t as usize][p as usize] += 1;
    }
    Ok(cm)
}

/// IoU, mean IoU over classes seen in truth or prediction, mean per-class
/// recall over classes seen in truth, and overall accuracy.
pub fn metrics(pred: &[u16], truth: &[u16], num_classes: usize) -> Result<Metrics> {
    let confusion = confusion_matrix(pred, truth, num_classes)?;
    Ok(from_confusion(confusion))
}

pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Metrics {
    let c = confusion.len();
    let tp = |i: usize| confusion[i][i];
    let row = |i: usize| confusion[i].iter().sum::<u64>();
    let col = |i: usize| confusion.iter().map(|r| r[i]).sum::<u64>();
    let per_class_iou: Vec<Option<f64>> = (0..c)
        .map(|i| {
            let union = row(i) + col(i) - tp(i);
            (union > 0).then(|| tp(i) as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = mean(&present);
    let recalls: Vec<f64> = (0..c).filter(|&i| row(i) > 0).map(|i| tp(i) as f64 / row(i) as f64).collect();
    let macc = mean(&recalls);
    let total: u64 = (0..c).map(row).sum();
    let correct: u64 = (0..c).map(tp).sum();
    let oacc = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    Metrics { confusion, per_class_iou, miou, macc, oacc }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
