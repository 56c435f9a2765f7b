//! Dense probability vectors and the elementary operations on them.

use serde::Serialize;

use crate::error::{Error, Result};

/// Sums below this are treated as empty.
pub const MIN_MASS: f64 = 1e-300;

/// Allowed deviation of a distribution's total from 1.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A dense distribution over the vocabulary. Entries lie in `[0, 1]` and sum
/// to 1 within [`SUM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty".into()));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidDistribution(format!("entry {i} = {p} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
        }
        Ok(ProbDist(probs))
    }

    pub fn uniform(n: usize) -> Self {
        ProbDist(vec![1.0 / n as f64; n])
    }

    /// Uniform over `support`, zero elsewhere.
    pub fn uniform_over(n: usize, support: &[usize]) -> Self {
        let mut probs = vec![0.0; n];
        let w = 1.0 / support.len() as f64;
        for &i in support {
            probs[i] = w;
        }
        ProbDist(probs)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, id: usize) -> f64 {
        self.0[id]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry; lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl std::ops::Deref for ProbDist {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Divides a non-negative vector by its sum.
///
/// Zero entries stay zero, which is what renormalizing via log-probabilities
/// followed by a softmax produces. Fails with [`Error::ZeroMass`] when there is
/// nothing to normalize; choosing a fallback is left to the caller.
pub fn normalize(raw: &[f64]) -> Result<ProbDist> {
    if let Some((index, &value)) = raw.iter().enumerate().find(|(_, v)| v.is_nan() || **v < 0.0) {
        return Err(Error::NegativeMass { index, value });
    }
    let sum: f64 = raw.iter().sum();
    if !sum.is_finite() || sum <= MIN_MASS {
        return Err(Error::ZeroMass(sum));
    }
    Ok(ProbDist(raw.iter().map(|v| v / sum).collect()))
}

/// Elementwise clamp to `[0, 1]`.
pub fn clip01(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.clamp(0.0, 1.0)).collect()
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> ProbDist {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbDist(exps.into_iter().map(|e| e / sum).collect())
}

/// `ln Σ exp(z)`, computed stably.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn normalize_examples() {
        assert_close(&normalize(&[0.2, 0.3, 0.5]).unwrap(), &[0.2, 0.3, 0.5], 1e-15);
        assert_close(&normalize(&[0.0, 0.8, 0.5]).unwrap(), &[0.0, 0.8 / 1.3, 0.5 / 1.3], 1e-15);
        let d = normalize(&[0.0, 0.8, 0.5]).unwrap();
        assert!((d[1] - 0.615_384_615_384_615_4).abs() < 1e-12);
        assert!((d[2] - 0.384_615_384_615_384_6).abs() < 1e-12);
        assert!(matches!(normalize(&[0.0, 0.0, 0.0]), Err(Error::ZeroMass(_))));
        assert!(matches!(normalize(&[0.5, -0.1]), Err(Error::NegativeMass { index: 1, .. })));
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip01(&[-0.3, 0.8, 0.5]), vec![0.0, 0.8, 0.5]);
        assert_eq!(clip01(&[0.1, 0.9]), vec![0.1, 0.9]);
        assert_eq!(clip01(&[1.4, -2.0]), vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        assert_close(&softmax(&[0.0; 4]), &[0.25; 4], 1e-15);
        for c in [-50.0, 0.0, 3.7, 400.0] {
            assert_close(&softmax(&[c, c + 2f64.ln()]), &[1.0 / 3.0, 2.0 / 3.0], 1e-12);
        }
        assert_close(&softmax(&[1.0, 2.0, 3.0]), &[0.09003, 0.24473, 0.66524], 1e-5);
    }

    #[test]
    fn prob_dist_validation() {
        assert!(ProbDist::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbDist::new(vec![0.5, 0.4]).is_err());
        assert!(ProbDist::new(vec![1.5, -0.5]).is_err());
        assert!(ProbDist::new(vec![]).is_err());
    }

    proptest! {
        #[test]
        fn normalize_idempotent(v in prop::collection::vec(0.0f64..10.0, 1..32)) {
            prop_assume!(v.iter().sum::<f64>() > 1e-6);
            let once = normalize(&v).unwrap();
            let twice = normalize(&once).unwrap();
            prop_assert!((once.iter().sum::<f64>() - 1.0).abs() < SUM_TOLERANCE);
            for (a, b) in once.iter().zip(twice.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-20.0f64..20.0, 1..32), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = softmax(&v);
            let b = softmax(&shifted);
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn clip_idempotent_and_monotone(v in prop::collection::vec(-3.0f64..3.0, 1..32), bump in 0.0f64..2.0) {
            let once = clip01(&v);
            prop_assert_eq!(clip01(&once), once.clone());
            let bumped: Vec<f64> = v.iter().map(|x| x + bump).collect();
            for (a, b) in once.iter().zip(clip01(&bumped)) {
                prop_assert!(*a <= b);
            }
        }

        #[test]
        fn log_then_softmax_equals_normalize(v in prop::collection::vec(1e-6f64..5.0, 1..32)) {
            let logs: Vec<f64> = v.iter().map(|x| x.ln()).collect();
            let a = softmax(&logs);
            let b = normalize(&v).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
