use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits `[B, K]`.
pub fn softmax_xent(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, k) = logits.dim();
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    let mut grad = Array2::zeros((b, k));
    let mut loss = 0.0;
    for (n, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelRange { label, classes: k });
        }
        let row = logits.row(n);
        let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_denom = denom.ln() + max;
        loss += log_denom - row[label];
        for j in 0..k {
            grad[[n, j]] = (row[j] - log_denom).exp() / b as f64;
        }
        grad[[n, label]] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, grad))
}
