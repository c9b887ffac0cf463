//! Seeded parameter initialisers. Each tensor draws from its own stream keyed
//! by the parameter name, so adding a layer does not perturb the others.

use polyformer_tensor::rng::RngKey;
use polyformer_tensor::{Real, Tensor};
use rand_distr::{Distribution, Normal};

pub fn normal<T: Real>(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor<T> {
    let mut rng = RngKey::new(seed).child_str(name).rng();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| T::lit(dist.sample(&mut rng)))
}

/// He-normal for a layer feeding a ReLU.
pub fn kaiming<T: Real>(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor<T> {
    normal(seed, name, shape, (2.0 / fan_in as f64).sqrt())
}
