//! Classification losses over logits.
//!
//! Probabilities are floored at `PROB_FLOOR` inside every logarithm so a
//! saturated softmax can never produce a non-finite loss. Gradients are the
//! exact analytic expressions; the finite-difference tests in this crate
//! check them directly.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Numerically stable softmax over the last axis of `[n, c]` logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let shape = logits.shape();
    assert_eq!(shape.len(), 2, "softmax expects [n, c] logits");
    let c = shape[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|&e| e / sum));
    }
    Tensor::from_vec(shape, out)
}

/// Mean cross-entropy of `[n, c]` logits against class indices.
///
/// Returns the scalar loss and its gradient w.r.t. the logits,
/// `(softmax - onehot) / n`.
pub fn cross_entropy_mean(logits: &Tensor, targets: &[usize]) -> (f64, Tensor) {
    let n = logits.shape()[0];
    let c = logits.shape()[1];
    assert_eq!(targets.len(), n, "one target per row");
    let probs = softmax(logits);
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, (&t, row)) in targets.iter().zip(grad.data_mut().chunks_exact_mut(c)).enumerate() {
        debug_assert!(t < c, "target {t} out of range at row {i}");
        loss -= row[t].max(PROB_FLOOR).ln();
        row[t] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }
    (loss * inv_n, grad)
}

/// Mean Shannon entropy (natural log) of the softmax of `[n, c]` logits.
///
/// Returns the scalar and its gradient w.r.t. the logits:
/// `dH/dz_k = -p_k (ln p_k + H_row) / n`.
pub fn entropy_mean(logits: &Tensor) -> (f64, Tensor) {
    let n = logits.shape()[0];
    let c = logits.shape()[1];
    let probs = softmax(logits);
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (row, grow) in probs.data().chunks_exact(c).zip(grad.chunks_exact_mut(c)) {
        let h: f64 = -row.iter().map(|&p| p * p.max(PROB_FLOOR).ln()).sum::<f64>();
        total += h;
        for (g, &p) in grow.iter_mut().zip(row.iter()) {
            *g = -p * (p.max(PROB_FLOOR).ln() + h) * inv_n;
        }
    }
    (total * inv_n, Tensor::from_vec(logits.shape(), grad))
}

/// Largest mean entropy a `c`-class distribution can have (`ln c`).
pub fn max_entropy(c: usize) -> f64 {
    (c as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_of_confident_correct_prediction_is_zero() {
        let logits = Tensor::from_vec(&[1, 2], vec![50.0, -50.0]);
        let (loss, _) = cross_entropy_mean(&logits, &[0]);
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn cross_entropy_of_uniform_is_ln2() {
        let logits = Tensor::from_vec(&[2, 2], vec![0.3, 0.3, -1.2, -1.2]);
        let (loss, _) = cross_entropy_mean(&logits, &[0, 1]);
        assert!((loss - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn entropy_peaks_at_uniform() {
        let uniform = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]);
        let (h, g) = entropy_mean(&uniform);
        assert!((h - core::f64::consts::LN_2).abs() < 1e-12);
        // At the maximum the gradient vanishes.
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
        let skewed = Tensor::from_vec(&[1, 2], vec![2.0, -2.0]);
        let (h2, _) = entropy_mean(&skewed);
        assert!(h2 < h);
    }

    #[test]
    fn saturated_softmax_stays_finite() {
        let logits = Tensor::from_vec(&[1, 2], vec![2000.0, -2000.0]);
        let (loss, grad) = cross_entropy_mean(&logits, &[1]);
        assert!(loss.is_finite());
        assert!(grad.data().iter().all(|v| v.is_finite()));
        let (h, hg) = entropy_mean(&logits);
        assert!(h.is_finite() && h >= 0.0);
        assert!(hg.data().iter().all(|v| v.is_finite()));
    }
}
