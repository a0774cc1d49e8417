//! Evaluation metrics: ROC AUC, F1 and mean squared error.

use std::cmp::Ordering;

use crate::error::{shape_err, NcartError, Result};
use crate::matrix::Matrix;

/// Binary ROC AUC via the Mann-Whitney rank statistic; tied scores share
/// their mean rank, so a tie counts as half a correctly ordered pair.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(shape_err("roc_auc", scores.len(), positive.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(NcartError::NonFinite("roc_auc scores".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(NcartError::InvalidInput("roc_auc needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Unweighted mean of one-vs-rest AUCs over the classes present in `labels`
/// (absent classes have no positives and are left out). With two columns
/// this is the binary AUC of column 1.
pub fn roc_auc_multiclass(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(shape_err("roc_auc", probs.rows(), labels.len()));
    }
    let k = probs.cols();
    if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
        return Err(NcartError::InvalidInput(format!("class index {bad} out of range for {k} classes")));
    }
    if k == 2 {
        let pos: Vec<bool> = labels.iter().map(|&c| c == 1).collect();
        return roc_auc(&probs.column(1), &pos);
    }
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..k {
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if pos.iter().any(|&p| p) && !pos.iter().all(|&p| p) {
            total += roc_auc(&probs.column(c), &pos)?;
            used += 1;
        }
    }
    if used == 0 {
        return Err(NcartError::InvalidInput("roc_auc needs at least two classes".into()));
    }
    Ok(total / used as f64)
}

fn class_f1(pred: &[usize], labels: &[usize], class: usize) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &l) in pred.iter().zip(labels) {
        match (p == class, l == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    // Harmonic mean of precision and recall, written over counts.
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// F1 of the positive class (label 1) when `classes == 2`, otherwise the
/// macro average over all `classes`. Empty precision or recall counts as 0.
pub fn f1(pred: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(shape_err("f1", labels.len(), pred.len()));
    }
    if classes == 2 {
        return Ok(class_f1(pred, labels, 1));
    }
    if classes == 0 {
        return Err(NcartError::InvalidInput("f1 over zero classes".into()));
    }
    Ok((0..classes).map(|c| class_f1(pred, labels, c)).sum::<f64>() / classes as f64)
}

/// Row-wise argmax, first index on ties.
pub fn argmax_rows(probs: &Matrix) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| {
            probs
                .row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn mse(pred: &[f64], targets: &[f64]) -> Result<f64> {
    if pred.len() != targets.len() {
        return Err(shape_err("mse", targets.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(NcartError::InvalidInput("mse of an empty sequence".into()));
    }
    Ok(pred.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}
