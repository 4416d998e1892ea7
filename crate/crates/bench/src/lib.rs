//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sharpscape_core::synth::{generate_dataset, Dataset, SynthConfig};
use sharpscape_core::Tensor;

pub fn normal(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()).unwrap()
}

/// Default-shaped samples (64 bins x 101 frames), fewer of them.
pub fn small_dataset() -> Dataset {
    generate_dataset(&SynthConfig {
        train: 64,
        test: 18,
        ..SynthConfig::default()
    })
    .unwrap()
}
