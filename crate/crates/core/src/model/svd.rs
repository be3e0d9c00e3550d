use nalgebra::{linalg::SVD, DMatrix, DVector};

use crate::error::{Error, Result};

/// Singular values at or below `RANK_CUTOFF * lambda_1` count as zero.
pub const RANK_CUTOFF: f64 = 1e-10;

/// Thin SVD `X = U diag(lambda) V^T` truncated to the numerical rank.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    /// `rows x rank`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// `rank` singular values, non-increasing and strictly positive.
    pub lambda: DVector<f64>,
    /// `cols x rank`, orthonormal columns.
    pub v: DMatrix<f64>,
}

impl ThinSvd {
    pub fn rank(&self) -> usize {
        self.lambda.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (mut col, &s) in us.column_iter_mut().zip(self.lambda.iter()) {
            col *= s;
        }
        us * self.v.transpose()
    }
}

/// Computes the thin SVD of `matrix` and drops directions below the rank
/// cutoff. A zero matrix yields rank 0 with empty factors.
pub fn svd_thin(matrix: &DMatrix<f64>) -> Result<ThinSvd> {
    let (rows, cols) = matrix.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("svd of an empty matrix"));
    }
    super::check_finite(matrix, "svd input")?;

    let svd = SVD::try_new(matrix.clone(), true, true, f64::EPSILON, 0).ok_or(Error::SvdFailed)?;
    let u_full = svd.u.ok_or(Error::SvdFailed)?;
    let v_t = svd.v_t.ok_or(Error::SvdFailed)?;
    let sigma = svd.singular_values;

    // Stable sort keeps the routine's order among equal values.
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));

    let largest = order.first().map(|&i| sigma[i]).unwrap_or(0.0);
    let rank = if largest > 0.0 {
        order
            .iter()
            .take_while(|&&i| sigma[i] > RANK_CUTOFF * largest)
            .count()
    } else {
        0
    };

    let mut u = DMatrix::zeros(rows, rank);
    let mut v = DMatrix::zeros(cols, rank);
    let mut lambda = DVector::zeros(rank);
    for (k, &i) in order.iter().take(rank).enumerate() {
        u.set_column(k, &u_full.column(i));
        v.set_column(k, &v_t.row(i).transpose());
        lambda[k] = sigma[i];
    }
    Ok(ThinSvd { u, lambda, v })
}
