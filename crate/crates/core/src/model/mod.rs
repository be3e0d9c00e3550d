//! Domain types shared by every stage of the pipeline.
//!
//! All matrices are `nalgebra::DMatrix<f64>`, which is column-major; the
//! persistence format in [`io`] relies on that layout.

mod config;
pub mod io;
mod svd;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use config::{TrainConfig, UpdateMode};
pub use svd::{svd_thin, ThinSvd, RANK_CUTOFF};

/// Tolerance on `| ||psi_j|| - 1 |` accepted by [`Dictionary::new`].
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// An `N x L` sparsifying dictionary with unit-norm atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: DMatrix<f64>,
}

impl Dictionary {
    /// Wraps `atoms`, rejecting non-finite entries and columns whose norm is
    /// off by more than [`UNIT_NORM_TOL`].
    pub fn new(atoms: DMatrix<f64>) -> Result<Self> {
        check_finite(&atoms, "dictionary")?;
        if atoms.nrows() == 0 || atoms.ncols() == 0 {
            return Err(Error::invalid("dictionary must have at least one row and one atom"));
        }
        for (j, col) in atoms.column_iter().enumerate() {
            let norm = col.norm();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(format!(
                    "atom {j} has norm {norm}, expected 1 within {UNIT_NORM_TOL:e}"
                )));
            }
        }
        Ok(Self { atoms })
    }

    /// Rescales every column of `matrix` to unit length.
    pub fn normalized(mut matrix: DMatrix<f64>) -> Result<Self> {
        check_finite(&matrix, "dictionary")?;
        for (j, mut col) in matrix.column_iter_mut().enumerate() {
            let norm = col.norm();
            if norm < 1e-12 {
                return Err(Error::invalid(format!("atom {j} is (numerically) zero")));
            }
            col /= norm;
        }
        Self::new(matrix)
    }

    /// Skips validation; callers guarantee unit columns.
    pub(crate) fn from_unit_columns(atoms: DMatrix<f64>) -> Self {
        debug_assert!(atoms
            .column_iter()
            .all(|c| (c.norm() - 1.0).abs() <= 1e-8));
        Self { atoms }
    }

    pub fn signal_dim(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.atoms
    }
}

/// A sensing matrix together with the SVD factors of the dictionary it was
/// designed for.
#[derive(Debug, Clone)]
pub struct SensingDesign {
    pub(crate) phi: DMatrix<f64>,
    /// `N x rank` left singular vectors of the source dictionary.
    pub(crate) svd_u: DMatrix<f64>,
    /// Singular values actually inverted when forming `phi` (floored, see
    /// `sensing::CONDITION_FLOOR`), descending.
    pub(crate) svd_lambda: DVector<f64>,
    pub(crate) rank: usize,
}

impl SensingDesign {
    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn svd_u(&self) -> &DMatrix<f64> {
        &self.svd_u
    }

    pub fn svd_lambda(&self) -> &DVector<f64> {
        &self.svd_lambda
    }

    /// Numerical rank of the dictionary the design was derived from.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn measurements(&self) -> usize {
        self.phi.nrows()
    }

    pub fn signal_dim(&self) -> usize {
        self.phi.ncols()
    }

    /// Number of rows of `phi` that carry energy: `min(M, rank)`.
    pub fn active_rows(&self) -> usize {
        self.measurements().min(self.rank)
    }

    pub fn into_phi(self) -> DMatrix<f64> {
        self.phi
    }
}

/// Sparse codes for a batch of signals, one `(support, values)` pair per
/// column. Supports are sorted ascending.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseCodeBatch {
    pub supports: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
    pub sparsity: usize,
}

impl SparseCodeBatch {
    pub fn column_count(&self) -> usize {
        self.supports.len()
    }

    /// `(atom, coefficient)` pairs of column `k`.
    pub fn column(&self, k: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.supports[k]
            .iter()
            .copied()
            .zip(self.values[k].iter().copied())
    }

    /// Expands to a dense `atoms x columns` coefficient matrix.
    pub fn to_dense(&self, atoms: usize) -> DMatrix<f64> {
        let mut theta = DMatrix::zeros(atoms, self.column_count());
        for k in 0..self.column_count() {
            for (j, v) in self.column(k) {
                theta[(j, k)] = v;
            }
        }
        theta
    }

    /// `dict * Theta` without forming the dense coefficient matrix.
    pub fn synthesize(&self, dict: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(dict.nrows(), self.column_count());
        for k in 0..self.column_count() {
            let mut col = out.column_mut(k);
            for (j, v) in self.column(k) {
                col.axpy(v, &dict.column(j), 1.0);
            }
        }
        out
    }

    pub fn max_nonzeros(&self) -> usize {
        self.supports.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Forgetting-factor weighted second moments `A_t = sum w_i Theta_i Theta_i^T / eta`
/// and `B_t = sum w_i X_i Theta_i^T / eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateStats {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub t: u64,
}

impl SurrogateStats {
    pub fn new(signal_dim: usize, atoms: usize) -> Self {
        Self {
            a: DMatrix::zeros(atoms, atoms),
            b: DMatrix::zeros(signal_dim, atoms),
            t: 0,
        }
    }
}

/// Per-iteration traces of the online dictionary learner.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct Diagnostics {
    /// `(gamma ||X_t - Psi Theta_t||^2 + ||Y_t - Phi Psi Theta_t||^2) / (2 eta)`,
    /// measured with the dictionary used for coding.
    pub batch_objective: Vec<f64>,
    /// `||Psi_t - Psi_{t-1}||_F`.
    pub dict_diff: Vec<f64>,
    pub atoms_replaced: Vec<usize>,
}

impl Diagnostics {
    pub fn len(&self) -> usize {
        self.batch_objective.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch_objective.is_empty()
    }

    pub fn extend(&mut self, other: &Diagnostics) {
        self.batch_objective.extend_from_slice(&other.batch_objective);
        self.dict_diff.extend_from_slice(&other.dict_diff);
        self.atoms_replaced.extend_from_slice(&other.atoms_replaced);
    }

    /// CSV with header `iteration,batchObjective,dictDiff,atomsReplaced`;
    /// iterations are 1-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,batchObjective,dictDiff,atomsReplaced\n");
        for i in 0..self.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                i + 1,
                self.batch_objective[i],
                self.dict_diff[i],
                self.atoms_replaced[i]
            ));
        }
        out
    }
}

pub(crate) fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains non-finite entries")))
    }
}

pub(crate) fn ensure_shape(m: &DMatrix<f64>, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.shape() == (rows, cols) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!(
            "{what} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dictionary_rejects_off_unit_columns() {
        let mut m = DMatrix::identity(3, 3);
        assert!(Dictionary::new(m.clone()).is_ok());
        m[(0, 0)] = 1.0 + 2e-9;
        assert!(Dictionary::new(m.clone()).is_err());
        m[(0, 0)] = 1.0 + 5e-10;
        assert!(Dictionary::new(m).is_ok());
    }

    #[test]
    fn dictionary_rejects_nan() {
        let mut m = DMatrix::identity(2, 2);
        m[(1, 0)] = f64::NAN;
        assert!(Dictionary::new(m).is_err());
    }

    #[test]
    fn normalized_rescales_columns() {
        let m = DMatrix::from_column_slice(2, 2, &[3.0, 4.0, 0.0, -2.0]);
        let d = Dictionary::normalized(m).unwrap();
        assert!((d.matrix()[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((d.matrix()[(1, 1)] + 1.0).abs() < 1e-15);
        assert!(Dictionary::normalized(DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn code_batch_dense_and_synthesis_agree() {
        let codes = SparseCodeBatch {
            supports: vec![vec![0, 2], vec![], vec![1]],
            values: vec![vec![1.5, -2.0], vec![], vec![0.5]],
            sparsity: 2,
        };
        let dict = DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 - 4.0);
        let dense = codes.to_dense(3);
        assert_eq!(dict.clone() * dense, codes.synthesize(&dict));
        assert_eq!(codes.max_nonzeros(), 2);
    }

    #[test]
    fn diagnostics_csv_layout() {
        let d = Diagnostics {
            batch_objective: vec![2.5],
            dict_diff: vec![0.125],
            atoms_replaced: vec![3],
        };
        assert_eq!(
            d.to_csv(),
            "iteration,batchObjective,dictDiff,atomsReplaced\n1,2.5,0.125,3\n"
        );
    }
}
