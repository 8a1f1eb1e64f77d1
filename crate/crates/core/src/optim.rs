//! Adam with one state (and one step counter) per parameter partition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParameterPartition;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("optim.learning_rate", format!("must be positive, got {}", self.learning_rate)));
        }
        for (field, b) in [("optim.beta1", self.beta1), ("optim.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, format!("must be in [0, 1), got {b}")));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::config("optim.epsilon", format!("must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// First/second moment buffers for every tensor of one partition.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(partition: &ParameterPartition<T>) -> Self {
        let zeros = || partition.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self { t: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update of `partition`. `grads[k]` belongs to
/// `partition.tensors[k]`; `None` is a zero gradient.
pub fn adam_step<T: Scalar>(
    partition: &mut ParameterPartition<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    cfg: &OptimConfig,
) -> Result<()> {
    if partition.frozen {
        return Err(Error::Frozen(partition.name.to_string()));
    }
    let n = partition.tensors.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::InvalidArgument(format!(
            "partition `{}` has {n} tensors but got {} gradients and {} moment buffers",
            partition.name,
            grads.len(),
            state.m.len()
        )));
    }
    for (k, g) in grads.iter().enumerate() {
        let want = partition.tensors[k].shape();
        if let Some(g) = g {
            crate::tensor::ensure_same_shape(g.shape(), want)?;
        }
        crate::tensor::ensure_same_shape(state.m[k].shape(), want)?;
        crate::tensor::ensure_same_shape(state.v[k].shape(), want)?;
    }

    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let step_size = T::from_f64_lossy(cfg.learning_rate / (1.0 - cfg.beta1.powi(t)));
    let sqrt_bc2 = T::from_f64_lossy((1.0 - cfg.beta2.powi(t)).sqrt());
    let eps = T::from_f64_lossy(cfg.epsilon);
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);

    for (k, g) in grads.iter().enumerate() {
        let w = partition.tensors[k].data_mut();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for j in 0..w.len() {
            let gj = g.as_ref().map_or(T::zero(), |g| g.data()[j]);
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            w[j] -= step_size * m[j] / (v[j].sqrt() / sqrt_bc2 + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::layers::PartitionName;

    fn partition(name: PartitionName, values: &[f64]) -> ParameterPartition<f64> {
        ParameterPartition::new(name, vec![("w".into(), Tensor::from_f64(vec![values.len()], values).unwrap())])
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = partition(PartitionName::Judge, &[1.0, -2.0]);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[None], &mut s, &OptimConfig::default()).unwrap();
        assert_eq!(p.tensors[0].data(), &[1.0, -2.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn hand_evaluated_first_step() {
        let mut p = partition(PartitionName::Judge, &[1.0]);
        let mut s = AdamState::new(&p);
        let g = Tensor::from_f64(vec![1], &[0.5]).unwrap();
        adam_step(&mut p, &[Some(g)], &mut s, &OptimConfig::default()).unwrap();
        assert!((s.m[0].data()[0] - 0.05).abs() < 1e-15);
        assert!((s.v[0].data()[0] - 0.00025).abs() < 1e-15);
        // m̂ = 0.5, v̂ = 0.25: step = 1e-4 * 0.5 / (0.5 + 1e-8)
        let expected = 1.0 - 1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((p.tensors[0].data()[0] - expected).abs() < 1e-15);
        assert!((p.tensors[0].data()[0] - 0.9999).abs() < 1e-9);
    }

    #[test]
    fn frozen_partition_is_an_error_and_untouched() {
        let mut p = partition(PartitionName::Advocate(2), &[0.25, 0.5]);
        p.frozen = true;
        let mut s = AdamState::new(&p);
        let before = p.tensors[0].clone();
        let g = Tensor::from_f64(vec![2], &[1.0, 1.0]).unwrap();
        for _ in 0..100 {
            let err = adam_step(&mut p, &[Some(g.clone())], &mut s, &OptimConfig::default()).unwrap_err();
            assert!(matches!(err, Error::Frozen(ref n) if n == "advocate_2"));
        }
        assert_eq!(p.tensors[0], before);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn step_isolated_to_partition() {
        let mut a = partition(PartitionName::Judge, &[1.0, 2.0]);
        let b = partition(PartitionName::Advocate(1), &[3.0, 4.0]);
        let b_before = b.tensors[0].clone();
        let mut sa = AdamState::new(&a);
        let sb = AdamState::new(&b);
        let g = Tensor::from_f64(vec![2], &[0.3, -0.3]).unwrap();
        adam_step(&mut a, &[Some(g)], &mut sa, &OptimConfig::default()).unwrap();
        assert_eq!(b.tensors[0], b_before);
        assert_eq!(sb.t, 0);
        assert_ne!(a.tensors[0].data(), &[1.0, 2.0]);
    }

    #[test]
    fn constant_gradient_step_approaches_learning_rate() {
        let cfg = OptimConfig::default();
        let mut p = partition(PartitionName::Judge, &[0.0]);
        let mut s = AdamState::new(&p);
        let g = Tensor::from_f64(vec![1], &[0.7]).unwrap();
        let mut last = 0.0;
        for _ in 0..10_000 {
            let before = p.tensors[0].data()[0];
            adam_step(&mut p, &[Some(g.clone())], &mut s, &cfg).unwrap();
            last = before - p.tensors[0].data()[0];
        }
        assert!((last - cfg.learning_rate).abs() / cfg.learning_rate < 0.01, "{last}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = partition(PartitionName::Judge, &[1.0, 2.0]);
        let mut s = AdamState::new(&p);
        let g = Tensor::from_f64(vec![3], &[0.0; 3]).unwrap();
        assert!(adam_step(&mut p, &[Some(g)], &mut s, &OptimConfig::default()).is_err());
        assert!(adam_step(&mut p, &[], &mut s, &OptimConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        let bad = OptimConfig { learning_rate: 0.0, ..Default::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("optim.learning_rate"));
        let bad = OptimConfig { beta2: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn identical_inputs_identical_updates(
            w in prop::collection::vec(-2.0f64..2.0, 1..8),
            seed in 0u64..1000,
        ) {
            let g: Vec<f64> = w.iter().enumerate().map(|(i, v)| (v * 3.1 + seed as f64 + i as f64).sin()).collect();
            let g = Tensor::from_f64(vec![w.len()], &g).unwrap();
            let run = || {
                let mut p = partition(PartitionName::Judge, &w);
                let mut s = AdamState::new(&p);
                for _ in 0..3 {
                    adam_step(&mut p, &[Some(g.clone())], &mut s, &OptimConfig::default()).unwrap();
                }
                (p.tensors[0].clone(), s)
            };
            prop_assert_eq!(run(), run());
        }
    }
}
