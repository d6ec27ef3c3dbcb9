//! Soft accuracy and the grounding-faithfulness metrics CGR, CGW, CGD.
//!
//! An instance is correctly grounded when any ground-truth region lands in
//! the model's sensitive set: the regions with attention above a threshold,
//! truncated to a cap of the highest-attention ones. CGR is the correctly
//! grounded share of right predictions, CGW the same share of wrong ones,
//! and CGD = CGR - CGW measures whether grounding actually drives the
//! answer, orthogonally to accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One evaluated instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub pred_index: usize,
    /// Soft-accuracy credit: the label score of the predicted answer.
    pub score: f64,
    pub type_id: usize,
    pub attention: Vec<f64>,
    pub mask: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_type_accuracy: BTreeMap<usize, f64>,
    pub cgr: f64,
    pub cgw: f64,
    pub cgd: f64,
    pub n_rp: usize,
    pub n_wp: usize,
    pub n_rg_rp: usize,
    pub n_rg_wp: usize,
    pub threshold: f64,
    pub cap: usize,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub degenerate_counts: bool,
}

/// Mean soft-accuracy, overall and per type.
pub fn soft_accuracy(records: &[PredictionRecord]) -> Result<(f64, BTreeMap<usize, f64>)> {
    if records.is_empty() {
        return Err(Error::Empty("no prediction records".into()));
    }
    let overall = records.iter().map(|r| r.score).sum::<f64>() / records.len() as f64;
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = sums.entry(r.type_id).or_insert((0.0, 0));
        e.0 += r.score;
        e.1 += 1;
    }
    let per_type = sums
        .into_iter()
        .map(|(t, (s, n))| (t, s / n as f64))
        .collect();
    Ok((overall, per_type))
}

/// Does any ground-truth region fall inside the sensitive set?
///
/// Sensitive set: regions with `attention >= t`, truncated to the `cap`
/// highest-attention regions. Ground truth: `mask >= 0.5`.
pub fn grounding_hit(attention: &[f64], mask: &[f64], t: f64, cap: usize) -> bool {
    debug_assert!(t > 0.0 && t < 1.0);
    debug_assert!(cap >= 1);
    let mut sensitive: Vec<usize> = (0..attention.len())
        .filter(|&i| attention[i] >= t)
        .collect();
    sensitive.sort_by(|&a, &b| {
        attention[b]
            .partial_cmp(&attention[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    sensitive.truncate(cap);
    sensitive.into_iter().any(|i| mask[i] >= 0.5)
}

/// CGR / CGW / CGD with the stated zero-denominator convention: a ratio
/// over zero instances is reported as 0 and flagged.
pub fn cgr_cgw_cgd(records: &[PredictionRecord], t: f64, cap: usize) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Empty("no prediction records".into()));
    }
    let (accuracy, per_type_accuracy) = soft_accuracy(records)?;
    let mut n_rp = 0;
    let mut n_wp = 0;
    let mut n_rg_rp = 0;
    let mut n_rg_wp = 0;
    for r in records {
        let grounded = grounding_hit(&r.attention, &r.mask, t, cap);
        if r.score > 0.0 {
            n_rp += 1;
            if grounded {
                n_rg_rp += 1;
            }
        } else {
            n_wp += 1;
            if grounded {
                n_rg_wp += 1;
            }
        }
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            100.0 * num as f64 / den as f64
        }
    };
    let cgr = ratio(n_rg_rp, n_rp);
    let cgw = ratio(n_rg_wp, n_wp);
    Ok(MetricsReport {
        accuracy,
        per_type_accuracy,
        cgr,
        cgw,
        cgd: cgr - cgw,
        n_rp,
        n_wp,
        n_rg_rp,
        n_rg_wp,
        threshold: t,
        cap,
        degenerate_counts: n_rp == 0 || n_wp == 0,
    })
}

/// Cap paired with a threshold: the published pairs for 0.1/0.2/0.3/0.4,
/// `floor(0.9/t)` otherwise.
pub fn cap_for_threshold(t: f64) -> usize {
    const PAIRS: [(f64, usize); 4] = [(0.1, 9), (0.2, 4), (0.3, 3), (0.4, 2)];
    for (pt, cap) in PAIRS {
        if (t - pt).abs() < 1e-9 {
            return cap;
        }
    }
    ((0.9 / t).floor() as usize).max(1)
}

/// Evaluate the metrics at each threshold with its paired cap.
pub fn sweep_thresholds(
    records: &[PredictionRecord],
    thresholds: &[f64],
) -> Result<Vec<MetricsReport>> {
    thresholds
        .iter()
        .map(|&t| cgr_cgw_cgd(records, t, cap_for_threshold(t)))
        .collect()
}
