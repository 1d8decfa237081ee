//! Softmax cross-entropy, averaged over the batch.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// logits: (B, C), labels: class indices of length B.
/// Returns the mean loss and its gradient w.r.t. the logits.
/// Stabilized by per-row max subtraction.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    if logits.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "logits must be (batch, classes), got {:?}",
            logits.shape()
        )));
    }
    let (b_n, c_n) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b_n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for batch of {b_n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c_n) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: c_n,
        });
    }

    let inv_b = T::one() / T::from_usize(b_n).unwrap();
    let ld = logits.data();
    let mut grad = Tensor::zeros(vec![b_n, c_n]);
    let mut loss = T::zero();
    for b in 0..b_n {
        let row = &ld[b * c_n..(b + 1) * c_n];
        let max = row.iter().cloned().fold(row[0], T::max);
        let mut denom = T::zero();
        for &v in row {
            denom = denom + (v - max).exp();
        }
        let log_denom = denom.ln();
        loss = loss - ((row[labels[b]] - max) - log_denom);
        for c in 0..c_n {
            let p = (row[c] - max).exp() / denom;
            let target = if c == labels[b] { T::one() } else { T::zero() };
            grad.data_mut()[b * c_n + c] = (p - target) * inv_b;
        }
    }
    let loss = loss * inv_b;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".to_string()));
    }
    Ok((loss, grad))
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let (b_n, c_n) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(labels.len(), b_n);
    let ld = logits.data();
    let mut correct = 0usize;
    for b in 0..b_n {
        let row = &ld[b * c_n..(b + 1) * c_n];
        let mut best = 0usize;
        for c in 1..c_n {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == labels[b] {
            correct += 1;
        }
    }
    correct as f64 / b_n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_logits_give_ln2_for_two_classes() {
        let logits = Tensor::new(vec![3, 2], vec![0.5f32; 6]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 0]).unwrap();
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn loss_vanishes_as_correct_margin_grows() {
        let mut prev = f32::INFINITY;
        for margin in [1.0f32, 5.0, 20.0, 80.0] {
            let logits = Tensor::new(vec![1, 2], vec![margin, 0.0]).unwrap();
            let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
            assert!(loss >= 0.0);
            // non-strict: the loss underflows to exactly 0 once the margin
            // saturates single precision
            assert!(loss <= prev);
            prev = loss;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn rejects_out_of_range_label() {
        let logits = Tensor::new(vec![1, 2], vec![0.0f32, 0.0]).unwrap();
        assert!(matches!(
            softmax_cross_entropy(&logits, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn large_logits_stay_finite() {
        let logits = Tensor::new(vec![1, 2], vec![1e4f32, -1e4]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(loss.is_finite());
        assert!(grad.is_finite());
    }

    #[test]
    fn accuracy_counts_argmax_matches() {
        let logits = Tensor::new(vec![2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(accuracy(&logits, &[0, 1]), 1.0);
        assert_eq!(accuracy(&logits, &[1, 1]), 0.5);
    }
}
