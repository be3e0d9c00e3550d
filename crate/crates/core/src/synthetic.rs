//! Seeded generators for planted-dictionary benchmarks and tests.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::{Dictionary, SparseCodeBatch};

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Gaussian matrix with unit-norm columns.
pub fn random_dictionary<R: Rng + ?Sized>(rows: usize, atoms: usize, rng: &mut R) -> Dictionary {
    Dictionary::normalized(gaussian_matrix(rows, atoms, rng))
        .expect("gaussian columns are non-zero with probability one")
}

/// Random orthonormal `n x n` matrix (QR of a Gaussian matrix).
pub fn random_orthonormal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    gaussian_matrix(n, n, rng).qr().q()
}

/// `count` signals, each a combination of exactly `sparsity` atoms of `psi`
/// with coefficients `scale * (1 + |g|) * sign`, `g` standard normal. Keeping
/// the magnitudes away from zero makes the planted supports identifiable.
pub fn planted_signals<R: Rng + ?Sized>(
    psi: &Dictionary,
    sparsity: usize,
    count: usize,
    scale: f64,
    rng: &mut R,
) -> (DMatrix<f64>, SparseCodeBatch) {
    let mut supports = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let mut support = sample(rng, psi.atom_count(), sparsity).into_vec();
        support.sort_unstable();
        let vals: Vec<f64> = support
            .iter()
            .map(|_| {
                let g: f64 = StandardNormal.sample(rng);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                sign * scale * (1.0 + g.abs())
            })
            .collect();
        supports.push(support);
        values.push(vals);
    }
    let codes = SparseCodeBatch {
        supports,
        values,
        sparsity,
    };
    (codes.synthesize(psi.matrix()), codes)
}
