//! Classification, regression and joint objectives with their gradients
//! with respect to the pre-sigmoid logits.

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Non-negative weights of the three VF regression terms (VFI, MD, PSD).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: [f64; 3],
}

impl LossWeights {
    pub fn new(alpha: [f64; 3]) -> Result<Self> {
        if alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::invalid(
                "alpha",
                format!("{alpha:?} must be finite and non-negative"),
            ));
        }
        Ok(LossWeights { alpha })
    }

    pub fn zero() -> Self {
        LossWeights { alpha: [0.0; 3] }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: [1.0; 3] }
    }
}

fn check_finite(name: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::invalid(name, "non-finite input"))
    }
}

/// Mean squared error per attribute over the masked-in samples. An attribute
/// with no masked-in sample contributes 0.
pub fn regression_loss(
    pred: &[[f64; 3]],
    target: &[[f64; 3]],
    mask: &[[bool; 3]],
) -> Result<[f64; 3]> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::Shape(format!(
            "regression batch lengths differ: {} / {} / {}",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    check_finite("vf_pred", pred.iter().flatten().copied())?;
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for ((p, t), m) in pred.iter().zip(target).zip(mask) {
        for j in 0..3 {
            if m[j] {
                check_finite("vf_target", [t[j]])?;
                sums[j] += (t[j] - p[j]).powi(2);
                counts[j] += 1;
            }
        }
    }
    Ok(std::array::from_fn(|j| {
        if counts[j] == 0 {
            0.0
        } else {
            sums[j] / counts[j] as f64
        }
    }))
}

fn check_labels(labels: &[f64]) -> Result<()> {
    match labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        Some(y) => Err(Error::invalid("label", format!("{y} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// Two-term binary cross-entropy averaged over the batch.
pub fn classification_loss(prob: &[f64], labels: &[f64]) -> Result<f64> {
    if prob.len() != labels.len() || prob.is_empty() {
        return Err(Error::Shape(format!(
            "classification batch: {} probabilities, {} labels",
            prob.len(),
            labels.len()
        )));
    }
    check_finite("class_prob", prob.iter().copied())?;
    check_labels(labels)?;
    let sum: f64 = prob
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / prob.len() as f64)
}

pub fn total_loss(l_cls: f64, l_reg: [f64; 3], weights: &LossWeights) -> Result<f64> {
    check_finite("loss", std::iter::once(l_cls).chain(l_reg))?;
    Ok(l_cls
        + weights
            .alpha
            .iter()
            .zip(l_reg)
            .map(|(a, l)| a * l)
            .sum::<f64>())
}

/// d L_cls / d logit for sigmoid probabilities. Zero where the clamp is active.
pub fn classification_grad_logits(prob: &[f64], labels: &[f64]) -> Vec<f64> {
    let n = prob.len() as f64;
    prob.iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if p < PROB_EPS || p > 1.0 - PROB_EPS {
                0.0
            } else {
                (p - y) / n
            }
        })
        .collect()
}

/// d (sum_j alpha_j L_reg^j) / d logit for sigmoid regression heads.
pub fn regression_grad_logits(
    pred: &[[f64; 3]],
    target: &[[f64; 3]],
    mask: &[[bool; 3]],
    weights: &LossWeights,
) -> Vec<[f64; 3]> {
    let mut counts = [0usize; 3];
    for m in mask {
        for j in 0..3 {
            counts[j] += usize::from(m[j]);
        }
    }
    pred.iter()
        .zip(target)
        .zip(mask)
        .map(|((p, t), m)| {
            std::array::from_fn(|j| {
                if m[j] {
                    weights.alpha[j] * 2.0 * (p[j] - t[j]) / counts[j] as f64 * p[j] * (1.0 - p[j])
                } else {
                    0.0
                }
            })
        })
        .collect()
}
