//! Seeded parameter initialization.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Standard deviation used for every convolution and projection weight.
pub const WEIGHT_STD: f64 = 0.02;

/// Registers freshly initialized parameters in a store.
///
/// Draws come from a single ChaCha8 stream in registration order, so a model
/// built twice from the same seed is bit-identical.
pub struct Initializer<'s, T: Real> {
    store: &'s mut ParamStore<T>,
    rng: ChaCha8Rng,
    std: f64,
}

impl<'s, T: Real> Initializer<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            std: WEIGHT_STD,
        }
    }

    /// Truncated normal with the configured deviation, cut at two deviations.
    pub fn weight(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>) -> ParamId {
        let shape = shape.into();
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                data.push(T::from_f64(z * self.std));
            }
        }
        self.store
            .add(name, Tensor::new(shape, data).expect("length matches shape"))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>) -> ParamId {
        self.store.add(name, Tensor::ones(shape))
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_and_deterministic() {
        let build = || {
            let mut s = ParamStore::<f32>::new();
            let mut init = Initializer::new(&mut s, 3);
            init.weight("w", [64, 64]);
            s
        };
        let (a, b) = (build(), build());
        let w = a.get(a.find("w").unwrap());
        assert_eq!(w.data(), b.get(b.find("w").unwrap()).data());
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
        let mean = w.data().iter().sum::<f32>() / w.len() as f32;
        let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / w.len() as f32;
        // Two-sigma truncation shrinks the deviation to about 0.88 of nominal.
        assert!((var.sqrt() / 0.02 - 0.88).abs() < 0.03, "{}", var.sqrt());
    }
}
