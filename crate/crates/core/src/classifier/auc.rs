//! Area under the ROC curve via the Mann–Whitney rank statistic.

use super::{ClassifierError, Result};

/// Fraction of (positive, negative) pairs ordered correctly, ties counting
/// one half, computed from midranks in `O(n log n)`.
pub fn mann_whitney_auc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(ClassifierError::OneClassTestSet);
    }
    if positives.iter().chain(negatives).any(|v| !v.is_finite()) {
        return Err(ClassifierError::NonFiniteScore);
    }
    let mut all: Vec<(f64, bool)> =
        positives.iter().map(|&v| (v, true)).chain(negatives.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum keeps midranks integral.
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let midrank_x2 = (i + 1 + j + 1) as u128;
        let pos_in_run = all[i..=j].iter().filter(|(_, p)| *p).count() as u128;
        rank_sum_x2 += midrank_x2 * pos_in_run;
        i = j + 1;
    }
    let np = positives.len() as u128;
    let nn = negatives.len() as u128;
    // U = R − np(np+1)/2, so 2U = 2R − np(np+1).
    let u_x2 = rank_sum_x2 - np * (np + 1);
    Ok(u_x2 as f64 / (2 * np * nn) as f64)
}
