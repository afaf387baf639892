//! Frozen, seed-reproducible parameter collections.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Dense layer parameters: `weight` is `[out, in]`, `bias` is `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Arc<Tensor>,
    pub bias: Arc<Tensor>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Named tensors plus the seed they were drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    seed: u64,
    stream: u64,
    tensors: BTreeMap<String, Arc<Tensor>>,
}

/// Draws layers from one ChaCha8 stream, in call order.
///
/// Weights are uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, scaled by
/// `gain`; biases are zero unless drawn with [`ParameterBuilder::dense_with_bias`].
pub struct ParameterBuilder {
    rng: ChaCha8Rng,
    set: ParameterSet,
}

impl ParameterBuilder {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            rng,
            set: ParameterSet {
                seed,
                stream,
                tensors: BTreeMap::new(),
            },
        }
    }

    pub fn dense(&mut self, name: &str, in_dim: usize, out_dim: usize, gain: f64) -> Dense {
        let bound = gain / (in_dim as f64).sqrt();
        let weight = self.uniform(&format!("{name}.weight"), &[out_dim, in_dim], bound);
        let bias = Arc::new(Tensor::zeros(&[out_dim]));
        self.set.tensors.insert(format!("{name}.bias"), Arc::clone(&bias));
        Dense { weight, bias }
    }

    pub fn dense_with_bias(&mut self, name: &str, in_dim: usize, out_dim: usize, gain: f64) -> Dense {
        let bound = gain / (in_dim as f64).sqrt();
        let weight = self.uniform(&format!("{name}.weight"), &[out_dim, in_dim], bound);
        let bias = self.uniform(&format!("{name}.bias"), &[out_dim], bound);
        Dense { weight, bias }
    }

    /// Uniform tensor in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Arc<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let t = Arc::new(Tensor::from_parts(shape.to_vec(), data));
        self.set.tensors.insert(name.to_string(), Arc::clone(&t));
        t
    }

    pub fn finish(self) -> ParameterSet {
        self.set
    }
}

impl ParameterSet {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let build = || {
            let mut b = ParameterBuilder::new(42, 1);
            b.dense("a", 8, 4, 1.0);
            b.dense_with_bias("b", 4, 2, 1.0);
            b.finish()
        };
        assert_eq!(build(), build());
        let mut other = ParameterBuilder::new(43, 1);
        other.dense("a", 8, 4, 1.0);
        assert_ne!(build().get("a.weight"), other.finish().get("a.weight"));
    }

    #[test]
    fn init_bounds_and_zero_bias() {
        let mut b = ParameterBuilder::new(7, 0);
        let d = b.dense("l", 16, 5, 1.0);
        assert!(d.weight.data().iter().all(|w| w.abs() <= 0.25));
        assert!(d.bias.data().iter().all(|&v| v == 0.0));
        assert_eq!(d.parameter_count(), 16 * 5 + 5);
    }
}
