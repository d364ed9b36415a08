//! Linear probes over latent representations.
//!
//! A probe is a logistic-regression classifier trained from scratch on
//! (feature, label) pairs. Probes measure how linearly decodable a quantity
//! is from a representation: a protected attribute that a fresh probe can no
//! longer read out of g(x̂) has been hidden from the deployed model's
//! feature extraction. Training is full-batch gradient descent with
//! deterministic initialization, so probe accuracies are reproducible.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::tensor::Tensor;

#[cfg(not(feature = "std"))]
use num_traits::Float;

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { iterations: 500, learning_rate: 0.5, l2: 1e-4 }
    }
}

/// Trained logistic-regression probe with its input standardization.
#[derive(Debug, Clone)]
pub struct Probe {
    weights: Vec<f64>,
    bias: f64,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Probe {
    /// Fit on (features, ±1 labels) by full-batch gradient descent.
    pub fn train(
        features: &[Vec<f64>],
        labels: &[i8],
        config: &ProbeConfig,
    ) -> Result<Probe, CoreError> {
        if features.is_empty() {
            return Err(CoreError::EmptyInput);
        }
        if features.len() != labels.len() {
            return Err(CoreError::LengthMismatch { left: features.len(), right: labels.len() });
        }
        let dim = features[0].len();
        let n = features.len() as f64;

        // Per-dimension standardization keeps plain GD well-conditioned.
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, &v) in mean.iter_mut().zip(f.iter()) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; dim];
        for f in features {
            for (s, (&v, &m)) in scale.iter_mut().zip(f.iter().zip(mean.iter())) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut scale {
            *s = s.sqrt().max(1e-8);
        }

        let std_feats: Vec<Vec<f64>> = features
            .iter()
            .map(|f| f.iter().zip(mean.iter().zip(scale.iter())).map(|(&v, (&m, &s))| (v - m) / s).collect())
            .collect();

        let mut weights = vec![0.0; dim];
        let mut bias = 0.0;
        for _ in 0..config.iterations {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (f, &label) in std_feats.iter().zip(labels.iter()) {
                let t = if label == 1 { 1.0 } else { 0.0 };
                let logit: f64 =
                    bias + weights.iter().zip(f.iter()).map(|(w, x)| w * x).sum::<f64>();
                let p = 1.0 / (1.0 + (-logit).exp());
                let err = (p - t) / n;
                for (g, &x) in gw.iter_mut().zip(f.iter()) {
                    *g += err * x;
                }
                gb += err;
            }
            for (w, g) in weights.iter_mut().zip(gw.iter()) {
                *w -= config.learning_rate * (g + config.l2 * *w);
            }
            bias -= config.learning_rate * gb;
        }
        Ok(Probe { weights, bias, mean, scale })
    }

    pub fn predict(&self, feature: &[f64]) -> i8 {
        let logit: f64 = self.bias
            + self
                .weights
                .iter()
                .zip(feature.iter().zip(self.mean.iter().zip(self.scale.iter())))
                .map(|(w, (&v, (&m, &s)))| w * (v - m) / s)
                .sum::<f64>();
        if logit > 0.0 {
            1
        } else {
            -1
        }
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[i8]) -> f64 {
        if features.is_empty() {
            return 0.0;
        }
        let correct = features
            .iter()
            .zip(labels.iter())
            .filter(|(f, &l)| self.predict(f) == l)
            .count();
        correct as f64 / features.len() as f64
    }
}

/// Split-half probe protocol: a fixed-seed shuffle assigns half the samples
/// to training and half to evaluation, so structured input orderings cannot
/// leak into the split. Deterministic across calls.
pub fn probe_accuracy(
    features: &[Vec<f64>],
    labels: &[i8],
    config: &ProbeConfig,
) -> Result<f64, CoreError> {
    if features.len() < 4 {
        return Err(CoreError::TooFewSamples { got: features.len(), need: 4 });
    }
    let mut rng = crate::rng::Stream::new(0x9406_e000_0000_0001);
    let perm = rng.permutation(features.len());
    let half = features.len() / 2;
    let (mut train_f, mut train_l) = (Vec::new(), Vec::new());
    let (mut eval_f, mut eval_l) = (Vec::new(), Vec::new());
    for (slot, &i) in perm.iter().enumerate() {
        if slot < half {
            train_f.push(features[i].clone());
            train_l.push(labels[i]);
        } else {
            eval_f.push(features[i].clone());
            eval_l.push(labels[i]);
        }
    }
    let probe = Probe::train(&train_f, &train_l, config)?;
    Ok(probe.accuracy(&eval_f, &eval_l))
}

/// Spatially pool a `[n,c,h,w]` feature batch into n vectors of length c.
pub fn pooled_rows(features: &Tensor) -> Vec<Vec<f64>> {
    let shape = features.shape();
    assert_eq!(shape.len(), 4, "expected [n,c,h,w] features");
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    (0..n)
        .map(|i| {
            (0..c)
                .map(|ch| {
                    let plane = &features.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    plane.iter().sum::<f64>() / hw as f64
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn gaussian_blobs(n: usize, gap: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<i8>) {
        let mut rng = Stream::new(seed);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label: i8 = if i % 2 == 0 { 1 } else { -1 };
            let center = label as f64 * gap;
            feats.push(vec![center + rng.normal(), rng.normal(), 10.0 * rng.normal()]);
            labels.push(label);
        }
        (feats, labels)
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (feats, labels) = gaussian_blobs(200, 3.0, 1);
        let acc = probe_accuracy(&feats, &labels, &ProbeConfig::default()).unwrap();
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn unseparable_noise_stays_near_chance() {
        let (feats, labels) = gaussian_blobs(400, 0.0, 2);
        let acc = probe_accuracy(&feats, &labels, &ProbeConfig::default()).unwrap();
        assert!((0.3..0.7).contains(&acc), "accuracy {acc}");
    }

    #[test]
    fn probe_is_deterministic() {
        let (feats, labels) = gaussian_blobs(100, 1.0, 3);
        let a = probe_accuracy(&feats, &labels, &ProbeConfig::default()).unwrap();
        let b = probe_accuracy(&feats, &labels, &ProbeConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pooled_rows_average_planes() {
        let t = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 3.0, 5.0, 7.0]);
        let rows = pooled_rows(&t);
        assert_eq!(rows, vec![vec![2.0, 6.0]]);
    }
}
