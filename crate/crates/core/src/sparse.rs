//! Orthogonal Matching Pursuit and the two dictionaries it is run against:
//! the stacked training system `[sqrt(gamma) Psi; Phi Psi]` and the
//! equivalent dictionary `Phi Psi` used for decoding measurements.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Dictionary, SparseCodeBatch};

/// A new atom whose component orthogonal to the current support is below
/// this fraction of its norm is treated as linearly dependent.
const DEPENDENCE_TOL: f64 = 1e-10;

/// `[sqrt(gamma) Psi; Phi Psi]` plus fingerprints of the matrices it was built from.
#[derive(Debug, Clone)]
pub struct StackedDictionary {
    pub matrix: DMatrix<f64>,
    pub gamma: f64,
    pub psi_hash: u64,
    pub phi_hash: u64,
}

impl StackedDictionary {
    pub fn built_from(&self, psi: &Dictionary, phi: &DMatrix<f64>) -> bool {
        self.psi_hash == fingerprint(psi.matrix()) && self.phi_hash == fingerprint(phi)
    }
}

pub(crate) fn fingerprint(m: &DMatrix<f64>) -> u64 {
    let mut h = DefaultHasher::new();
    m.shape().hash(&mut h);
    for v in m.iter() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

pub fn build_stacked(psi: &Dictionary, phi: &DMatrix<f64>, gamma: f64) -> Result<StackedDictionary> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be > 0, got {gamma}")));
    }
    check_phi(phi, psi)?;
    let (n, l) = psi.matrix().shape();
    let m = phi.nrows();
    let mut matrix = DMatrix::zeros(n + m, l);
    matrix
        .rows_mut(0, n)
        .copy_from(&(psi.matrix() * gamma.sqrt()));
    matrix.rows_mut(n, m).copy_from(&(phi * psi.matrix()));
    Ok(StackedDictionary {
        matrix,
        gamma,
        psi_hash: fingerprint(psi.matrix()),
        phi_hash: fingerprint(phi),
    })
}

fn check_phi(phi: &DMatrix<f64>, psi: &Dictionary) -> Result<()> {
    if phi.ncols() != psi.signal_dim() {
        return Err(Error::ShapeMismatch(format!(
            "sensing matrix has {} columns, dictionary atoms have {} entries",
            phi.ncols(),
            psi.signal_dim()
        )));
    }
    Ok(())
}

/// Codes every column of `signals` over `dict` with at most `sparsity` atoms.
///
/// Atoms are chosen by largest `|<d_j, r>| / ||d_j||` (ties go to the lower
/// index) and coefficients are refitted by least squares on the whole support
/// after each pick, through an incrementally updated QR factorisation. A
/// column stops early once its residual norm is at most `residual_tol`.
pub fn omp(
    dict: &DMatrix<f64>,
    signals: &DMatrix<f64>,
    sparsity: usize,
    residual_tol: f64,
) -> Result<SparseCodeBatch> {
    let (m, l) = dict.shape();
    if m == 0 || l == 0 {
        return Err(Error::invalid("dictionary must be non-empty"));
    }
    if signals.ncols() == 0 {
        return Err(Error::invalid("no signals to code"));
    }
    if signals.nrows() != m {
        return Err(Error::ShapeMismatch(format!(
            "signals have {} rows, dictionary has {m}",
            signals.nrows()
        )));
    }
    if sparsity == 0 {
        return Err(Error::invalid("sparsity must be at least 1"));
    }
    let gram = dict.tr_mul(dict);
    let norms: Vec<f64> = (0..l).map(|j| gram[(j, j)].max(0.0).sqrt()).collect();
    if norms.iter().all(|&n| n == 0.0) {
        return Err(Error::invalid("every dictionary atom is zero"));
    }
    let correlations = dict.tr_mul(signals);

    let ctx = OmpContext {
        dict,
        gram: &gram,
        norms: &norms,
        sparsity,
        residual_tol,
    };
    let coded: Vec<ColumnCode> = (0..signals.ncols())
        .into_par_iter()
        .map(|k| ctx.code_column(signals.column(k).into_owned(), correlations.column(k).into_owned()))
        .collect();

    let dropped: usize = coded.iter().map(|c| c.dropped).sum();
    if dropped > 0 {
        log::warn!("omp: dropped {dropped} linearly dependent atom selections");
    }
    let mut supports = Vec::with_capacity(coded.len());
    let mut values = Vec::with_capacity(coded.len());
    for c in coded {
        supports.push(c.support);
        values.push(c.values);
    }
    Ok(SparseCodeBatch {
        supports,
        values,
        sparsity,
    })
}

struct OmpContext<'a> {
    dict: &'a DMatrix<f64>,
    gram: &'a DMatrix<f64>,
    norms: &'a [f64],
    sparsity: usize,
    residual_tol: f64,
}

struct ColumnCode {
    support: Vec<usize>,
    values: Vec<f64>,
    dropped: usize,
}

impl OmpContext<'_> {
    fn code_column(&self, signal: DVector<f64>, initial_corr: DVector<f64>) -> ColumnCode {
        let l = self.norms.len();
        let mut excluded = vec![false; l];
        let mut support: Vec<usize> = Vec::with_capacity(self.sparsity);
        // Orthonormal basis of the selected atoms and the upper-triangular R
        // with D_S = Q R, stored column by column.
        let mut q: Vec<DVector<f64>> = Vec::with_capacity(self.sparsity);
        let mut r_cols: Vec<Vec<f64>> = Vec::with_capacity(self.sparsity);
        let mut qtx: Vec<f64> = Vec::with_capacity(self.sparsity);
        let mut coef: Vec<f64> = Vec::new();
        let mut residual = signal.clone();
        let mut dropped = 0;

        while support.len() < self.sparsity {
            if residual.norm() <= self.residual_tol {
                break;
            }
            // corr = D^T x - G[:, S] theta_S = D^T r
            let mut best: Option<(usize, f64)> = None;
            for j in 0..l {
                if excluded[j] || self.norms[j] == 0.0 {
                    continue;
                }
                let mut c = initial_corr[j];
                for (&s, &t) in support.iter().zip(coef.iter()) {
                    c -= self.gram[(j, s)] * t;
                }
                let score = c.abs() / self.norms[j];
                if best.is_none_or(|(_, b)| score > b) {
                    best = Some((j, score));
                }
            }
            let Some((j, score)) = best else { break };
            if score == 0.0 {
                break;
            }

            // Two passes of modified Gram-Schmidt keep Q orthonormal to
            // working precision.
            let mut w = self.dict.column(j).into_owned();
            let mut r_col = vec![0.0; q.len() + 1];
            for _ in 0..2 {
                for (i, qi) in q.iter().enumerate() {
                    let h = qi.dot(&w);
                    w.axpy(-h, qi, 1.0);
                    r_col[i] += h;
                }
            }
            let nu = w.norm();
            excluded[j] = true;
            if nu <= DEPENDENCE_TOL * self.norms[j] {
                dropped += 1;
                continue;
            }
            w /= nu;
            r_col[q.len()] = nu;
            qtx.push(w.dot(&signal));
            let proj = w.dot(&residual);
            residual.axpy(-proj, &w, 1.0);
            q.push(w);
            r_cols.push(r_col);
            support.push(j);
            coef = back_substitute(&r_cols, &qtx);
        }

        let mut pairs: Vec<(usize, f64)> = support.into_iter().zip(coef).collect();
        pairs.sort_unstable_by_key(|p| p.0);
        let (support, values) = pairs.into_iter().unzip();
        ColumnCode {
            support,
            values,
            dropped,
        }
    }
}

/// Solves `R theta = rhs` for upper-triangular `R` given by columns.
fn back_substitute(r_cols: &[Vec<f64>], rhs: &[f64]) -> Vec<f64> {
    let k = rhs.len();
    let mut theta = rhs.to_vec();
    for i in (0..k).rev() {
        for c in (i + 1)..k {
            theta[i] -= r_cols[c][i] * theta[c];
        }
        theta[i] /= r_cols[i][i];
    }
    theta
}

/// Sparse coding of a training batch against `[sqrt(gamma) Psi; Phi Psi]`
/// with targets `[sqrt(gamma) X; Phi X]`, always spending the full budget.
pub fn encode_train(
    batch: &DMatrix<f64>,
    psi: &Dictionary,
    phi: &DMatrix<f64>,
    gamma: f64,
    sparsity: usize,
) -> Result<SparseCodeBatch> {
    let stacked = build_stacked(psi, phi, gamma)?;
    if batch.nrows() != psi.signal_dim() {
        return Err(Error::ShapeMismatch(format!(
            "batch rows {} != signal dimension {}",
            batch.nrows(),
            psi.signal_dim()
        )));
    }
    let targets = stack_targets(batch, phi, gamma);
    omp(&stacked.matrix, &targets, sparsity, 0.0)
}

pub(crate) fn stack_targets(batch: &DMatrix<f64>, phi: &DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    let n = batch.nrows();
    let m = phi.nrows();
    let mut targets = DMatrix::zeros(n + m, batch.ncols());
    targets.rows_mut(0, n).copy_from(&(batch * gamma.sqrt()));
    targets.rows_mut(n, m).copy_from(&(phi * batch));
    targets
}

/// Recovers signals from `measurements = Phi X` by OMP over `Phi Psi`, then
/// synthesises `Psi Theta`.
pub fn decode_measurements(
    measurements: &DMatrix<f64>,
    psi: &Dictionary,
    phi: &DMatrix<f64>,
    sparsity: usize,
    residual_tol: f64,
) -> Result<(SparseCodeBatch, DMatrix<f64>)> {
    check_phi(phi, psi)?;
    let equivalent = phi * psi.matrix();
    let codes = omp(&equivalent, measurements, sparsity, residual_tol)?;
    let reconstructed = codes.synthesize(psi.matrix());
    Ok((codes, reconstructed))
}
