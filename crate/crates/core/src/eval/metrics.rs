use serde::{Deserialize, Serialize};

use crate::domain::{AqiClass, N_CLASSES};
use crate::error::{Error, Result};

pub type Confusion = [[u64; N_CLASSES]; N_CLASSES];

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: format!("{a} predictions"),
            got: b.to_string(),
        });
    }
    Ok(())
}

/// Rows are true classes, columns predicted classes.
pub fn confusion(y_true: &[AqiClass], y_pred: &[AqiClass]) -> Result<Confusion> {
    check_lengths(y_true.len(), y_pred.len())?;
    let mut m = [[0u64; N_CLASSES]; N_CLASSES];
    for (t, p) in y_true.iter().zip(y_pred) {
        m[t.index()][p.index()] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: AqiClass,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

pub fn per_class_from_confusion(m: &Confusion) -> Vec<ClassMetrics> {
    (0..N_CLASSES)
        .map(|c| {
            let tp = m[c][c] as f64;
            let support: u64 = m[c].iter().sum();
            let predicted: u64 = (0..N_CLASSES).map(|r| m[r][c]).sum();
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if support == 0 { 0.0 } else { tp / support as f64 };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                class: AqiClass::from_index(c).expect("index below class count"),
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect()
}

pub fn per_class(y_true: &[AqiClass], y_pred: &[AqiClass]) -> Result<Vec<ClassMetrics>> {
    Ok(per_class_from_confusion(&confusion(y_true, y_pred)?))
}

pub fn weighted_f1_from_confusion(m: &Confusion) -> f64 {
    let pcs = per_class_from_confusion(m);
    let n: u64 = pcs.iter().map(|c| c.support).sum();
    if n == 0 {
        return 0.0;
    }
    pcs.iter()
        .filter(|c| c.support > 0)
        .map(|c| c.support as f64 / n as f64 * c.f1)
        .sum()
}

/// Support-weighted mean of per-class F1; classes absent from `y_true` are
/// skipped.
pub fn weighted_f1(y_true: &[AqiClass], y_pred: &[AqiClass]) -> Result<f64> {
    if y_true.is_empty() {
        return Err(Error::Empty("labels"));
    }
    Ok(weighted_f1_from_confusion(&confusion(y_true, y_pred)?))
}

/// One-vs-rest AUC per class via midranks. `None` when a class has no
/// positive or no negative instance.
pub fn roc_auc_ovr(y_true: &[AqiClass], probs: &[[f64; N_CLASSES]]) -> Result<[Option<f64>; N_CLASSES]> {
    check_lengths(y_true.len(), probs.len())?;
    let n = y_true.len();
    let mut out = [None; N_CLASSES];
    let mut order: Vec<usize> = (0..n).collect();
    for (c, slot) in out.iter_mut().enumerate() {
        let pos = y_true.iter().filter(|y| y.index() == c).count();
        let neg = n - pos;
        if pos == 0 || neg == 0 {
            continue;
        }
        order.sort_by(|&a, &b| probs[a][c].total_cmp(&probs[b][c]));
        let mut rank_sum = 0.0;
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && probs[order[j + 1]][c] == probs[order[i]][c] {
                j += 1;
            }
            // ranks i+1 ..= j+1 share their mean
            let mid = (i + j + 2) as f64 / 2.0;
            for &k in &order[i..=j] {
                if y_true[k].index() == c {
                    rank_sum += mid;
                }
            }
            i = j + 1;
        }
        let p = pos as f64;
        *slot = Some((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityRow {
    pub true_class: AqiClass,
    pub support: u64,
    /// Fraction of this class's instances predicted as each class.
    pub distribution: [f64; N_CLASSES],
    pub mean_ordinal_distance: f64,
}

/// Predicted-class histograms conditioned on each true class present.
pub fn severity_report(y_true: &[AqiClass], y_pred: &[AqiClass]) -> Result<Vec<SeverityRow>> {
    if y_true.is_empty() {
        return Err(Error::Empty("labels"));
    }
    Ok(severity_from_confusion(&confusion(y_true, y_pred)?))
}

pub fn severity_from_confusion(m: &Confusion) -> Vec<SeverityRow> {
    (0..N_CLASSES)
        .filter_map(|t| {
            let support: u64 = m[t].iter().sum();
            if support == 0 {
                return None;
            }
            let s = support as f64;
            let mut distribution = [0.0; N_CLASSES];
            let mut dist = 0.0;
            for p in 0..N_CLASSES {
                distribution[p] = m[t][p] as f64 / s;
                dist += m[t][p] as f64 * (t as f64 - p as f64).abs();
            }
            Some(SeverityRow {
                true_class: AqiClass::from_index(t).expect("index below class count"),
                support,
                distribution,
                mean_ordinal_distance: dist / s,
            })
        })
        .collect()
}

/// Most frequent class; ties go to the lower class.
pub fn majority_class(labels: &[AqiClass]) -> Result<AqiClass> {
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let mut counts = [0usize; N_CLASSES];
    for l in labels {
        counts[l.index()] += 1;
    }
    let mut best = 0;
    for c in 1..N_CLASSES {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    AqiClass::from_index(best)
}
