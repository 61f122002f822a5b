//! Input fixtures shared by the benchmarks in `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tame_core::nn::conv_expert_specs;
use tame_core::{Network, Tensor};

/// A batch of `n` uniform 28×28 images with labels in `0..classes`.
pub fn image_batch(n: usize, classes: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 784).map(|_| rng.random::<f32>()).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (
        Tensor::new(vec![n, 1, 28, 28], data).expect("shape matches"),
        labels,
    )
}

/// The two-output conv expert used on Split MNIST.
pub fn conv_expert(seed: u64) -> Network {
    let specs = conv_expert_specs(&[1, 28, 28], 2).expect("valid input shape");
    Network::new(
        vec![1, 28, 28],
        &specs,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .expect("valid specs")
}

/// Uniform losses in `[0, 1)`.
pub fn losses(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}
