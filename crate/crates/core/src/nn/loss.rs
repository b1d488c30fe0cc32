use crate::error::{FedError, Result};

/// Softmax cross-entropy of `logits` against class `label`.
///
/// Returns the loss and its gradient with respect to the logits. Uses the
/// log-sum-exp shift so saturated logits do not overflow.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(FedError::Usage(format!(
            "cross-entropy needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    if label >= logits.len() {
        return Err(FedError::Usage(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let log_z = max + sum_exp.ln();
    let loss = (log_z - logits[label]).max(0.0);
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - log_z).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = i;
        }
    }
    best
}
