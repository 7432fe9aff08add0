//! Part-segmentation metrics.

use crate::error::{DataError, Result};

/// Mean over parts of `|pred ∩ truth| / |pred ∪ truth|`; a part absent from
/// both prediction and truth counts as IoU 1.
pub fn shape_iou(pred: &[usize], truth: &[usize], num_parts: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(DataError::InvalidArgument(format!(
            "prediction has {} labels, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    if num_parts == 0 {
        return Err(DataError::InvalidArgument("num_parts must be positive".into()));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&l| l >= num_parts) {
        return Err(DataError::InvalidArgument(format!(
            "label {bad} out of range for {num_parts} parts"
        )));
    }
    let mut inter = vec![0usize; num_parts];
    let mut union = vec![0usize; num_parts];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let total: f64 = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
        .sum();
    Ok(total / num_parts as f64)
}

/// Instance-average mIoU: mean of per-shape IoUs.
pub fn mean_iou(shape_ious: &[f64]) -> f64 {
    if shape_ious.is_empty() {
        return 0.0;
    }
    shape_ious.iter().sum::<f64>() / shape_ious.len() as f64
}

/// Argmax over the `parts` logits starting at row `offset` of a `C × N`
/// row-major logit matrix, returned in local part numbering.
pub fn restricted_argmax<T: PartialOrd + Copy>(logits: &[T], n: usize, offset: usize, parts: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let mut best = 0;
            for p in 1..parts {
                if logits[(offset + p) * n + i] > logits[(offset + best) * n + i] {
                    best = p;
                }
            }
            best
        })
        .collect()
}
