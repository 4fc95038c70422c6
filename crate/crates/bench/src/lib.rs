//! Fixtures shared by the benchmarks.

use fcvad::backbone::ModelConfig;
use fcvad::tensor::Tensor;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform values in `[-1, 1)`.
pub fn random_tensor<const N: usize>(shape: [usize; N], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// The desk-scale model used by the synthetic runs.
pub fn toy_config() -> ModelConfig {
    ModelConfig { frame_size: 32, channel_plan: vec![8, 16, 32, 64], ..ModelConfig::default() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(random_tensor([2, 3], 1), random_tensor([2, 3], 1));
        assert!(random_tensor([64], 2).data().iter().all(|v| (-1.0..1.0).contains(v)));
        toy_config().validate().unwrap();
    }
}
