//! ROC AUC via the rank-sum statistic.

use crate::error::{Error, Result};

/// Probability that a random positive scores above a random negative, ties
/// counting one half. `O(n log n)` via midranks.
pub fn auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!(
            "AUC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of 1-based midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Unweighted mean over classes of the one-vs-rest AUC. `scores[i][k]` is
/// the class-`k` score of sample `i`.
pub fn auc_macro_ovr(scores: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != num_classes) {
        return Err(Error::Metric(format!(
            "score row of width {} for {num_classes} classes",
            row.len()
        )));
    }
    let mut total = 0.0;
    for k in 0..num_classes {
        if !labels.contains(&k) {
            return Err(Error::Metric(format!("class {k} absent from labels")));
        }
        let col: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let is_k: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        total += auc_binary(&col, &is_k)?;
    }
    Ok(total / num_classes as f64)
}

/// AUC of model outputs: one probability column means a binary task scored
/// on that column, otherwise macro one-vs-rest.
pub fn auc_for_outputs(probs: &[Vec<f64>], labels: &[u8], num_classes: usize) -> Result<f64> {
    if num_classes == 2 && probs.iter().all(|p| p.len() == 1) {
        let s: Vec<f64> = probs.iter().map(|p| p[0]).collect();
        let l: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        auc_binary(&s, &l)
    } else {
        let l: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        auc_macro_ovr(probs, &l, num_classes)
    }
}
