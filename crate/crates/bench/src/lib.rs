//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// `n × d` standard-normal matrix.
pub fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Array2::from_shape_simple_fn((n, d), || normal.sample(&mut rng))
}

/// Three well-separated 2-D blobs of `per` points each.
pub fn blobs(per: usize, seed: u64) -> Array2<f64> {
    let noise = gaussian(3 * per, 2, seed);
    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
    Array2::from_shape_fn((3 * per, 2), |(i, j)| centers[i / per][j] + noise[[i, j]])
}
