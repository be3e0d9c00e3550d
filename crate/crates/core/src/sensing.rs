//! Closed-form sensing-matrix design.
//!
//! For a dictionary `Psi = U diag(lambda) V^T` of rank `r`, every minimiser of
//! the Gram residual `||I_L - Psi^T Phi^T Phi Psi||_F^2` with least energy has
//! the form `Phi = [U_M 0] Lambda^{-1} U^T`. [`design_sensing`] returns the
//! representative with `U_M = I`; [`rotate_solution`] produces the others,
//! which all decode identically.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{ensure_shape, svd_thin, Dictionary, SensingDesign};

/// Singular values inside the inverted block are floored at this fraction of
/// the largest one.
pub const CONDITION_FLOOR: f64 = 1e-8;

/// Optimality report for a sensing matrix against a dictionary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GramResidualReport {
    /// `||I_L - Psi^T Phi^T Phi Psi||_F^2`.
    pub value: f64,
    /// `L - min(M, rank(Psi))`, the smallest achievable value.
    pub theoretical_min: f64,
    pub gap: f64,
}

pub fn design_sensing(psi: &Dictionary, measurements: usize) -> Result<SensingDesign> {
    if measurements == 0 {
        return Err(Error::invalid("number of measurements must be positive"));
    }
    let svd = svd_thin(psi.matrix())?;
    let rank = svd.rank();
    if rank == 0 {
        return Err(Error::DegenerateDictionary { largest: 0.0 });
    }
    if measurements >= psi.signal_dim() {
        log::warn!(
            "{measurements} measurements for {}-dimensional signals is not compressive",
            psi.signal_dim()
        );
    }

    let mut lambda = svd.lambda;
    let top = lambda[0];
    let floor = CONDITION_FLOOR * top;
    let active = measurements.min(rank);
    for (i, l) in lambda.iter_mut().take(active).enumerate() {
        if *l < floor {
            log::warn!(
                "singular value {i} is {:.3e} of the largest; flooring before inversion",
                *l / top
            );
            *l = floor;
        }
    }

    let phi = canonical_phi(&svd.u, &lambda, measurements, psi.signal_dim());
    Ok(SensingDesign {
        phi,
        svd_u: svd.u,
        svd_lambda: lambda,
        rank,
    })
}

/// `[I; 0] Lambda_active^{-1} U_active^T` embedded in `measurements` rows.
fn canonical_phi(
    u: &DMatrix<f64>,
    lambda: &DVector<f64>,
    measurements: usize,
    signal_dim: usize,
) -> DMatrix<f64> {
    let active = measurements.min(lambda.len());
    let mut phi = DMatrix::zeros(measurements, signal_dim);
    for k in 0..active {
        phi.row_mut(k)
            .copy_from(&(u.column(k).transpose() / lambda[k]));
    }
    phi
}

pub fn gram_residual(phi: &DMatrix<f64>, psi: &Dictionary) -> Result<GramResidualReport> {
    if phi.ncols() != psi.signal_dim() {
        return Err(Error::ShapeMismatch(format!(
            "phi has {} columns but signals have dimension {}",
            phi.ncols(),
            psi.signal_dim()
        )));
    }
    let rank = svd_thin(psi.matrix())?.rank();
    let equivalent = phi * psi.matrix();
    let gram = equivalent.tr_mul(&equivalent);
    let l = psi.atom_count();
    let value = (DMatrix::<f64>::identity(l, l) - gram).norm_squared();
    let theoretical_min = (l - phi.nrows().min(rank)) as f64;
    Ok(GramResidualReport {
        value,
        theoretical_min,
        gap: value - theoretical_min,
    })
}

/// Replaces the identity block of the canonical design by `rotation`.
pub fn rotate_solution(design: &SensingDesign, rotation: &DMatrix<f64>) -> Result<SensingDesign> {
    let m = design.measurements();
    ensure_shape(rotation, m, m, "rotation")?;
    let defect = (rotation.tr_mul(rotation) - DMatrix::<f64>::identity(m, m)).amax();
    if defect > 1e-9 {
        return Err(Error::invalid(format!(
            "rotation is not orthonormal (max |U^T U - I| = {defect:e})"
        )));
    }
    if design.rank < m {
        return Err(Error::invalid(format!(
            "rotations only apply when rank {} >= {m} measurements",
            design.rank
        )));
    }
    let canonical = canonical_phi(&design.svd_u, &design.svd_lambda, m, design.signal_dim());
    Ok(SensingDesign {
        phi: rotation * canonical,
        ..design.clone()
    })
}

/// The pair `Xi1 = Omega^{-1}` and `Xi2 = Omega^{-1} Phi^T Phi` with
/// `Omega = I + Phi^T Phi / gamma`, evaluated from the cached SVD.
#[derive(Debug, Clone)]
pub struct XiMatrices {
    pub xi1: DMatrix<f64>,
    pub xi2: DMatrix<f64>,
}

/// Only the `min(M, rank)` leading singular directions carry the non-trivial
/// blocks; on their orthogonal complement `Xi1` is the identity and `Xi2`
/// vanishes, so no explicit basis completion is formed.
pub fn xi_matrices(design: &SensingDesign, gamma: f64) -> Result<XiMatrices> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be > 0, got {gamma}")));
    }
    let n = design.signal_dim();
    let active = design.active_rows();
    let u = design.svd_u.columns(0, active);
    let lambda = design.svd_lambda.rows(0, active);

    let shrink = lambda.map(|l| 1.0 / (1.0 / (gamma * l * l) + 1.0) - 1.0);
    let pass = lambda.map(|l| 1.0 / (1.0 / gamma + l * l));

    let mut xi1 = DMatrix::identity(n, n);
    xi1 += &u * DMatrix::from_diagonal(&shrink) * u.transpose();
    let xi2 = &u * DMatrix::from_diagonal(&pass) * u.transpose();
    Ok(XiMatrices { xi1, xi2 })
}

/// `Omega = I_N + Phi^T Phi / gamma`.
pub fn omega(phi: &DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    let n = phi.ncols();
    DMatrix::identity(n, n) + phi.tr_mul(phi) / gamma
}

/// Outcome of [`design_sensing_gd`].
#[derive(Debug, Clone)]
pub struct GradientDescentRun {
    pub phi: DMatrix<f64>,
    /// `f(Phi)` before the first step and after every step.
    pub trace: Vec<f64>,
}

/// `f(Phi) = ||I - Psi^T Phi^T Phi Psi||_F^2 + penalty ||Phi||_F^2`.
pub fn penalized_gram_objective(phi: &DMatrix<f64>, psi: &Dictionary, penalty: f64) -> f64 {
    let e = phi * psi.matrix();
    let l = psi.atom_count() as f64;
    let eet = &e * e.transpose();
    l - 2.0 * e.norm_squared() + eet.norm_squared() + penalty * phi.norm_squared()
}

/// Fixed-step gradient descent on the penalised Gram objective, the iterative
/// baseline the closed form replaces. Fails if `f` rises ten steps in a row.
pub fn design_sensing_gd(
    psi: &Dictionary,
    penalty: f64,
    steps: usize,
    step_size: f64,
    init: &DMatrix<f64>,
) -> Result<GradientDescentRun> {
    if !(penalty >= 0.0) {
        return Err(Error::invalid("penalty must be >= 0"));
    }
    if !(step_size > 0.0) {
        return Err(Error::invalid("step size must be > 0"));
    }
    if init.ncols() != psi.signal_dim() {
        return Err(Error::ShapeMismatch(format!(
            "initial sensing matrix has {} columns, expected {}",
            init.ncols(),
            psi.signal_dim()
        )));
    }
    let s = psi.matrix() * psi.matrix().transpose();
    let mut phi = init.clone();
    let mut trace = vec![penalized_gram_objective(&phi, psi, penalty)];
    let mut rises = 0;
    for _ in 0..steps {
        let phi_s = &phi * &s;
        let grad = &phi * (2.0 * penalty) - &phi_s * 4.0 + &phi_s * phi.transpose() * &phi_s * 4.0;
        phi -= grad * step_size;
        let f = penalized_gram_objective(&phi, psi, penalty);
        let prev = *trace.last().expect("trace starts non-empty");
        trace.push(f);
        if !f.is_finite() {
            return Err(Error::StepSize { trace });
        }
        rises = if f > prev { rises + 1 } else { 0 };
        if rises >= 10 {
            return Err(Error::StepSize { trace });
        }
    }
    Ok(GradientDescentRun { phi, trace })
}
