//! Classification losses and the negative-gradient pseudo-label operators
//! for both loss families.
//!
//! Under the sigmoid+BCE family the negative gradient at the ensemble
//! output `H` is `2y * sigmoid(-2yH)`; it is clamped to `[0,1]` so it can
//! serve as a BCE target. Under softmax+CE the clipped negative gradient is
//! `y - p` on the label support and 0 elsewhere.

use serde::{Deserialize, Serialize};

const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossFamily {
    Bce,
    /// Softmax + cross-entropy.
    Sxce,
}

impl std::fmt::Display for LossFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossFamily::Bce => write!(f, "bce"),
            LossFamily::Sxce => write!(f, "sxce"),
        }
    }
}

/// Numerically safe sigmoid; saturates exactly past |z| = 30.
pub fn sigmoid(z: f64) -> f64 {
    if z > 30.0 {
        1.0
    } else if z < -30.0 {
        0.0
    } else if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_vec(z: &[f64]) -> Vec<f64> {
    z.iter().copied().map(sigmoid).collect()
}

/// Max-subtracted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// Per-instance BCE summed over classes:
/// `-sum_i y_i ln s(z_i) + (1-y_i) ln(1 - s(z_i))`.
pub fn bce_loss(logits: &[f64], labels: &[f64]) -> f64 {
    debug_assert_eq!(logits.len(), labels.len());
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let p = sigmoid(z);
            -(y * ln(p) + (1.0 - y) * ln(1.0 - p))
        })
        .sum()
}

/// BCE taken directly on scores `p` (not logits); the scores are clamped
/// into the log domain, so sums of probabilities above 1 stay finite.
pub fn bce_loss_on_probs(probs: &[f64], labels: &[f64]) -> f64 {
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| -(y * ln(p) + (1.0 - y) * ln(1.0 - p)))
        .sum()
}

/// d/dp of [`bce_loss_on_probs`] (zero where the clamp is active).
pub fn bce_probs_grad(probs: &[f64], labels: &[f64]) -> Vec<f64> {
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let mut g = 0.0;
            if p > LOG_FLOOR {
                g += -y / p.max(LOG_FLOOR);
            }
            if 1.0 - p > LOG_FLOOR {
                g += (1.0 - y) / (1.0 - p).max(LOG_FLOOR);
            }
            g
        })
        .collect()
}

/// Softmax cross-entropy: `-sum_i y_i ln softmax(z)_i`.
pub fn ce_loss(logits: &[f64], labels: &[f64]) -> f64 {
    let p = softmax(logits);
    -p.iter().zip(labels).map(|(&pi, &yi)| yi * ln(pi)).sum::<f64>()
}

pub fn loss(family: LossFamily, logits: &[f64], labels: &[f64]) -> f64 {
    match family {
        LossFamily::Bce => bce_loss(logits, labels),
        LossFamily::Sxce => ce_loss(logits, labels),
    }
}

/// Analytic per-instance gradient of [`loss`] with respect to the logits.
///
/// BCE: `s(z) - y`. Softmax CE with soft labels: `(sum_i y_i) p - y`.
pub fn loss_grad_wrt_logits(family: LossFamily, logits: &[f64], labels: &[f64]) -> Vec<f64> {
    match family {
        LossFamily::Bce => logits
            .iter()
            .zip(labels)
            .map(|(&z, &y)| sigmoid(z) - y)
            .collect(),
        LossFamily::Sxce => {
            let p = softmax(logits);
            let mass: f64 = labels.iter().sum();
            p.iter().zip(labels).map(|(&pi, &yi)| mass * pi - yi).collect()
        }
    }
}

/// BCE-family pseudo-label: `clamp(2y * sigmoid(-2yH), 0, 1)` per entry.
/// Entries with `y = 0` stay exactly 0.
pub fn pseudo_label_bce(labels: &[f64], ensemble: &[f64]) -> Vec<f64> {
    debug_assert_eq!(labels.len(), ensemble.len());
    labels
        .iter()
        .zip(ensemble)
        .map(|(&y, &h)| {
            if y == 0.0 {
                0.0
            } else {
                (2.0 * y * sigmoid(-2.0 * y * h)).clamp(0.0, 1.0)
            }
        })
        .collect()
}

/// CE-family pseudo-label: `clamp(y - p, 0, 1)` where `y > 0`, else 0.
/// `probs` is a probability vector, or the raw distribution-bias row when
/// the prior acts as the biased prediction.
pub fn pseudo_label_ce(labels: &[f64], probs: &[f64]) -> Vec<f64> {
    debug_assert_eq!(labels.len(), probs.len());
    labels
        .iter()
        .zip(probs)
        .map(|(&y, &p)| if y > 0.0 { (y - p).clamp(0.0, 1.0) } else { 0.0 })
        .collect()
}
