//! Rank-based AUC and impression-weighted user AUC.

use std::collections::BTreeMap;

/// Mann–Whitney AUC with average ranks for ties. `None` unless both classes
/// are present.
pub fn auc(predictions: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(predictions.len(), labels.len(), "auc: length mismatch");
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..predictions.len()).collect();
    idx.sort_by(|&a, &b| predictions[a].total_cmp(&predictions[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && predictions[idx[j + 1]] == predictions[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k] != 0).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// `Σ_u n_u·AUC_u / Σ_u n_u` over users with both classes, `n_u` being the
/// user's impression count.
pub fn uauc<U: Ord>(predictions: &[f64], labels: &[u8], users: &[U]) -> Option<f64> {
    assert_eq!(predictions.len(), users.len(), "uauc: length mismatch");
    let mut by_user: BTreeMap<&U, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for ((p, l), u) in predictions.iter().zip(labels).zip(users) {
        let e = by_user.entry(u).or_default();
        e.0.push(*p);
        e.1.push(*l);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (p, l) in by_user.values() {
        if let Some(a) = auc(p, l) {
            num += p.len() as f64 * a;
            den += p.len() as f64;
        }
    }
    (den > 0.0).then(|| num / den)
}
