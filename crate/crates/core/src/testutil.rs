use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::Dictionary;
use crate::synthetic;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    synthetic::gaussian_matrix(rows, cols, &mut rng(seed))
}

pub fn random_dictionary(rows: usize, atoms: usize, seed: u64) -> Dictionary {
    synthetic::random_dictionary(rows, atoms, &mut rng(seed))
}

pub fn random_orthonormal(n: usize, seed: u64) -> DMatrix<f64> {
    synthetic::random_orthonormal(n, &mut rng(seed))
}
