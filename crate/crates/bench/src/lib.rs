//! Seeded inputs for the criterion benches in `benches/`.

use lens_core::fixtures::from_means;
use lens_core::{EmbeddingMatrix, LensDb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` rows of uniform noise in `[-1, 1)^d`.
pub fn random_rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect()
}

pub fn random_matrix(seed: u64, n: usize, d: usize) -> EmbeddingMatrix {
    EmbeddingMatrix::from_rows(&random_rows(seed, n, d)).expect("non-zero rows")
}

/// One layer of `n` random component means.
pub fn random_db(seed: u64, n: usize, d: usize) -> LensDb {
    from_means(d, &[("layer", random_rows(seed, n, d))]).expect("valid db")
}
