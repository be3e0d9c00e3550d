//! Online mini-batch dictionary learning under the projected sparse
//! representation error.
//!
//! Each iteration codes a batch against the stacked system, folds the codes
//! into the surrogate statistics `(A_t, B_t)` and sweeps the dictionary
//! columns once (or `passes` times) by block-coordinate descent.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{check_finite, ensure_shape, Diagnostics, Dictionary, SensingDesign};
use crate::model::{SparseCodeBatch, SurrogateStats, TrainConfig, UpdateMode};
use crate::patches::BatchIterator;
use crate::sensing::{xi_matrices, XiMatrices};
use crate::sparse::encode_train;

/// Relative threshold on `A(j,j)` below which a column is left alone.
pub const USAGE_EPS: f64 = 1e-10;
/// Candidates shorter than this cannot be normalised.
pub const MIN_CANDIDATE_NORM: f64 = 1e-12;
/// Draws per replaced atom before giving up on finding a non-zero column.
pub const MAX_REPLACEMENT_DRAWS: usize = 100;

/// Folds one batch into the statistics:
/// `A_t = (1 - 1/t)^rho A_{t-1} + Theta Theta^T / eta`,
/// `B_t = (1 - 1/t)^rho B_{t-1} + X Theta^T / eta`, with `eta = batch.ncols()`.
///
/// At `t = 1` the old statistics are discarded for every `rho`.
pub fn update_stats(
    stats: &mut SurrogateStats,
    codes: &SparseCodeBatch,
    batch: &DMatrix<f64>,
    t: u64,
    rho: f64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("statistics step t starts at 1"));
    }
    let eta = batch.ncols();
    if eta == 0 || codes.column_count() != eta {
        return Err(Error::ShapeMismatch(format!(
            "{} codes for a batch of {eta} columns",
            codes.column_count()
        )));
    }
    ensure_shape(batch, stats.b.nrows(), eta, "batch")?;
    let atoms = stats.a.nrows();
    if codes.supports.iter().flatten().any(|&j| j >= atoms) {
        return Err(Error::invalid("code support refers to a missing atom"));
    }

    let forget = if t == 1 {
        0.0
    } else {
        (1.0 - 1.0 / t as f64).powf(rho)
    };
    stats.a *= forget;
    stats.b *= forget;
    let w = 1.0 / eta as f64;
    for k in 0..eta {
        let (support, values) = (&codes.supports[k], &codes.values[k]);
        for (p, &i) in support.iter().enumerate() {
            for (q, &j) in support.iter().enumerate() {
                stats.a[(i, j)] += w * (values[p] * values[q]);
            }
            stats.b.column_mut(i).axpy(w * values[p], &batch.column(k), 1.0);
        }
    }
    stats.t = t;
    Ok(())
}

fn check_stats(psi: &DMatrix<f64>, stats: &SurrogateStats, phi: &DMatrix<f64>) -> Result<()> {
    let (n, l) = psi.shape();
    ensure_shape(&stats.a, l, l, "A")?;
    ensure_shape(&stats.b, n, l, "B")?;
    ensure_shape(phi, phi.nrows(), n, "sensing matrix")
}

/// `Omega v = v + Phi^T Phi v / gamma` without forming `Omega`.
fn apply_omega(phi: &DMatrix<f64>, gamma: f64, v: &DMatrix<f64>) -> DMatrix<f64> {
    if phi.nrows() == 0 {
        return v.clone();
    }
    v + phi.tr_mul(&(phi * v)) / gamma
}

/// `1/2 Tr(Psi^T Omega Psi A) - Tr(Psi^T Omega B)`, `Omega = I + Phi^T Phi / gamma`.
pub fn surrogate_value(
    psi: &DMatrix<f64>,
    stats: &SurrogateStats,
    phi: &DMatrix<f64>,
    gamma: f64,
) -> Result<f64> {
    check_stats(psi, stats, phi)?;
    let omega_psi = apply_omega(phi, gamma, psi);
    let quad = omega_psi.dot(&(psi * &stats.a));
    let lin = omega_psi.dot(&stats.b);
    Ok(0.5 * quad - lin)
}

/// Gradient of [`surrogate_value`] in column `j`:
/// `Psi a_j - b_j + Phi^T Phi (Psi a_j - b_j) / gamma`.
pub fn surrogate_gradient_column(
    psi: &DMatrix<f64>,
    stats: &SurrogateStats,
    phi: &DMatrix<f64>,
    gamma: f64,
    j: usize,
) -> Result<DVector<f64>> {
    check_stats(psi, stats, phi)?;
    if j >= psi.ncols() {
        return Err(Error::invalid(format!("atom index {j} out of range")));
    }
    let r = psi * stats.a.column(j) - stats.b.column(j);
    let r = DMatrix::from_column_slice(r.nrows(), 1, r.as_slice());
    Ok(apply_omega(phi, gamma, &r).column(0).into_owned())
}

/// How a column's candidate position is computed.
#[derive(Debug, Clone, Copy)]
pub enum UpdateRule<'a> {
    /// `u = psi_j + (b_j - Psi a_j) / A(j,j)`.
    FixedPoint,
    /// `u = Xi1 [(b - Psi a)/A_jj + psi_j] + Xi2 [b/(A_jj gamma) + psi_j/gamma - Psi a/A_jj]`.
    Literal { xi: &'a XiMatrices, gamma: f64 },
}

/// Where a candidate is sent before it replaces the column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    UnitSphere,
    /// `u / max(||u||, 1)`.
    UnitBall,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnOutcome {
    /// Pre-projection candidate.
    Updated(DVector<f64>),
    Stale,
}

/// `A(j,j)` must exceed this for column `j` to move.
pub fn usage_threshold(stats: &SurrogateStats) -> f64 {
    USAGE_EPS * stats.a.trace() / stats.a.nrows() as f64
}

/// Moves column `j` of `psi` in place and reports the candidate.
pub fn update_column(
    psi: &mut DMatrix<f64>,
    stats: &SurrogateStats,
    j: usize,
    rule: UpdateRule<'_>,
    projection: Projection,
) -> ColumnOutcome {
    let ajj = stats.a[(j, j)];
    if !(ajj > usage_threshold(stats)) {
        return ColumnOutcome::Stale;
    }
    let psi_a = &*psi * stats.a.column(j);
    let b = stats.b.column(j);
    let old = psi.column(j);
    let u: DVector<f64> = match rule {
        UpdateRule::FixedPoint => old + (b - &psi_a) / ajj,
        UpdateRule::Literal { xi, gamma } => {
            let first = (b - &psi_a) / ajj + old;
            let second = b / (ajj * gamma) + old / gamma - &psi_a / ajj;
            &xi.xi1 * first + &xi.xi2 * second
        }
    };
    let norm = u.norm();
    if !(norm >= MIN_CANDIDATE_NORM) {
        return ColumnOutcome::Stale;
    }
    let scale = match projection {
        Projection::UnitSphere => norm,
        Projection::UnitBall => norm.max(1.0),
    };
    psi.column_mut(j).copy_from(&(&u / scale));
    ColumnOutcome::Updated(u)
}

/// Result of a full column sweep.
#[derive(Debug, Clone)]
pub struct DictionaryUpdate {
    pub dictionary: Dictionary,
    /// Atoms left unchanged in the last pass.
    pub stale: Vec<usize>,
}

/// Runs `passes` in-order sweeps over the columns, projecting as asked.
pub fn sweep_columns(
    psi: &mut DMatrix<f64>,
    stats: &SurrogateStats,
    rule: UpdateRule<'_>,
    projection: Projection,
    passes: usize,
) -> Vec<usize> {
    let mut stale = Vec::new();
    for _ in 0..passes {
        stale.clear();
        for j in 0..psi.ncols() {
            if update_column(psi, stats, j, rule, projection) == ColumnOutcome::Stale {
                stale.push(j);
            }
        }
    }
    stale
}

/// Block-coordinate dictionary update with unit-norm columns, warm-started
/// from `psi`.
pub fn dictionary_update(
    psi: &Dictionary,
    stats: &SurrogateStats,
    rule: UpdateRule<'_>,
    passes: usize,
) -> Result<DictionaryUpdate> {
    if passes == 0 {
        return Err(Error::config("dict_update_passes", "must be positive"));
    }
    ensure_shape(&stats.a, psi.atom_count(), psi.atom_count(), "A")?;
    ensure_shape(&stats.b, psi.signal_dim(), psi.atom_count(), "B")?;
    if let UpdateRule::Literal { xi, .. } = rule {
        ensure_shape(&xi.xi1, psi.signal_dim(), psi.signal_dim(), "Xi1")?;
    }
    let mut m = psi.matrix().clone();
    let stale = sweep_columns(&mut m, stats, rule, Projection::UnitSphere, passes);
    check_finite(&m, "updated dictionary")?;
    Ok(DictionaryUpdate {
        dictionary: Dictionary::from_unit_columns(m),
        stale,
    })
}

/// Atom selection counts since the last replacement sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomUsage {
    pub counts: Vec<u64>,
    /// Atoms the last dictionary update could not move.
    pub stale: Vec<bool>,
    pub last_reset_iteration: u64,
}

impl AtomUsage {
    pub fn new(atoms: usize) -> Self {
        Self {
            counts: vec![0; atoms],
            stale: vec![false; atoms],
            last_reset_iteration: 0,
        }
    }

    pub fn record(&mut self, codes: &SparseCodeBatch) {
        for &j in codes.supports.iter().flatten() {
            self.counts[j] += 1;
        }
    }

    pub fn set_stale(&mut self, stale: &[usize]) {
        self.stale.iter_mut().for_each(|s| *s = false);
        for &j in stale {
            self.stale[j] = true;
        }
    }

    /// Atoms due for replacement, ascending.
    pub fn unused(&self) -> Vec<usize> {
        (0..self.counts.len())
            .filter(|&j| self.counts[j] == 0 || self.stale[j])
            .collect()
    }

    pub fn reset(&mut self, iteration: u64) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.stale.iter_mut().for_each(|s| *s = false);
        self.last_reset_iteration = iteration;
    }
}

/// Overwrites every unused or stale atom with a normalised training column
/// drawn uniformly from `pool`, then resets the counters. Returns the new
/// dictionary and the replaced atom indices.
pub fn replace_unused_atoms<R: Rng + ?Sized>(
    psi: &Dictionary,
    usage: &mut AtomUsage,
    pool: &DMatrix<f64>,
    iteration: u64,
    rng: &mut R,
) -> Result<(Dictionary, Vec<usize>)> {
    if pool.ncols() == 0 {
        return Err(Error::invalid("replacement pool is empty"));
    }
    ensure_shape(pool, psi.signal_dim(), pool.ncols(), "replacement pool")?;
    let targets = usage.unused();
    let mut m = psi.matrix().clone();
    for &j in &targets {
        let col = draw_nonzero_column(pool, rng)?;
        m.column_mut(j).copy_from(&col);
    }
    usage.reset(iteration);
    Ok((Dictionary::from_unit_columns(m), targets))
}

fn draw_nonzero_column<R: Rng + ?Sized>(pool: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    for _ in 0..MAX_REPLACEMENT_DRAWS {
        let col = pool.column(rng.random_range(0..pool.ncols()));
        let norm = col.norm();
        if norm >= MIN_CANDIDATE_NORM {
            return Ok(col / norm);
        }
    }
    Err(Error::ZeroColumns {
        attempts: MAX_REPLACEMENT_DRAWS,
    })
}

/// `atoms` distinct non-zero columns of `data`, normalised.
pub fn sample_initial_dictionary<R: Rng + ?Sized>(
    data: &DMatrix<f64>,
    atoms: usize,
    rng: &mut R,
) -> Result<Dictionary> {
    let nonzero: Vec<usize> = (0..data.ncols())
        .filter(|&k| data.column(k).norm() >= MIN_CANDIDATE_NORM)
        .collect();
    if nonzero.len() < atoms {
        return Err(Error::ZeroColumns {
            attempts: data.ncols(),
        });
    }
    let picked = sample(rng, nonzero.len(), atoms);
    let mut m = DMatrix::zeros(data.nrows(), atoms);
    for (j, p) in picked.iter().enumerate() {
        let col = data.column(nonzero[p]);
        m.column_mut(j).copy_from(&(&col / col.norm()));
    }
    Dictionary::new(m)
}

/// `gamma ||R||^2 + ||Phi R||^2` summed over all columns of the residual `R`.
pub(crate) fn projected_error(residual: &DMatrix<f64>, phi: &DMatrix<f64>, gamma: f64) -> f64 {
    let projected = if phi.nrows() == 0 {
        0.0
    } else {
        (phi * residual).norm_squared()
    };
    gamma * residual.norm_squared() + projected
}

/// State of one online learning run; [`OnlineLearner::step`] performs a
/// single iteration.
pub struct OnlineLearner<'a> {
    data: &'a DMatrix<f64>,
    phi: DMatrix<f64>,
    xi: Option<XiMatrices>,
    psi: Dictionary,
    stats: SurrogateStats,
    usage: AtomUsage,
    batches: BatchIterator,
    rng: ChaCha8Rng,
    config: TrainConfig,
    t: u64,
    diagnostics: Diagnostics,
}

impl<'a> OnlineLearner<'a> {
    /// `phi = None` drops the projected term (plain sparse representation error).
    pub fn new(
        data: &'a DMatrix<f64>,
        phi: Option<&SensingDesign>,
        psi0: Dictionary,
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let n = psi0.signal_dim();
        if data.nrows() != n {
            return Err(Error::ShapeMismatch(format!(
                "training data has {} rows, dictionary atoms have {n}",
                data.nrows()
            )));
        }
        check_finite(data, "training data")?;
        if config.batch_size > data.ncols() {
            return Err(Error::config(
                "batch_size",
                format!(
                    "batch of {} exceeds the {} training columns",
                    config.batch_size,
                    data.ncols()
                ),
            ));
        }
        let phi_m = match phi {
            Some(d) => {
                if d.signal_dim() != n {
                    return Err(Error::ShapeMismatch(format!(
                        "sensing matrix has {} columns, signals have {n} entries",
                        d.signal_dim()
                    )));
                }
                d.phi().clone()
            }
            None => DMatrix::zeros(0, n),
        };
        let xi = match (config.update_mode, phi) {
            (UpdateMode::FixedPoint, _) => None,
            (UpdateMode::LiteralPaper, Some(d)) => Some(xi_matrices(d, config.gamma)?),
            (UpdateMode::LiteralPaper, None) => Some(XiMatrices {
                xi1: DMatrix::identity(n, n),
                xi2: DMatrix::zeros(n, n),
            }),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            data,
            phi: phi_m,
            xi,
            stats: SurrogateStats::new(n, psi0.atom_count()),
            usage: AtomUsage::new(psi0.atom_count()),
            psi: psi0,
            batches: BatchIterator::new(data.ncols(), config.batch_size, config.seed)?,
            rng,
            config: config.clone(),
            t: 0,
            diagnostics: Diagnostics::default(),
        })
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.psi
    }

    pub fn stats(&self) -> &SurrogateStats {
        &self.stats
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self) -> Result<()> {
        let t = self.t + 1;
        let cfg = &self.config;
        let batch = self.batches.next_batch(self.data);
        let codes = encode_train(&batch, &self.psi, &self.phi, cfg.gamma, cfg.sparsity)?;

        let residual = &batch - codes.synthesize(self.psi.matrix());
        let objective =
            0.5 * projected_error(&residual, &self.phi, cfg.gamma) / batch.ncols() as f64;

        update_stats(&mut self.stats, &codes, &batch, t, cfg.rho)?;
        self.usage.record(&codes);

        let rule = match &self.xi {
            None => UpdateRule::FixedPoint,
            Some(xi) => UpdateRule::Literal {
                xi,
                gamma: cfg.gamma,
            },
        };
        let update = dictionary_update(&self.psi, &self.stats, rule, cfg.dict_update_passes)?;
        self.usage.set_stale(&update.stale);
        let mut next = update.dictionary;

        let mut replaced = 0;
        if cfg.replace_every > 0 && t % cfg.replace_every as u64 == 0 {
            let (swapped, atoms) =
                replace_unused_atoms(&next, &mut self.usage, self.data, t, &mut self.rng)?;
            if !atoms.is_empty() {
                log::debug!("iteration {t}: replaced atoms {atoms:?}");
            }
            replaced = atoms.len();
            next = swapped;
        }

        let diff = (next.matrix() - self.psi.matrix()).norm();
        self.diagnostics.batch_objective.push(objective);
        self.diagnostics.dict_diff.push(diff);
        self.diagnostics.atoms_replaced.push(replaced);
        self.psi = next;
        self.t = t;
        Ok(())
    }

    pub fn finish(self) -> (Dictionary, Diagnostics) {
        (self.psi, self.diagnostics)
    }
}

/// Runs `config.iter_dic` iterations from `psi0`.
pub fn train_dictionary_online(
    data: &DMatrix<f64>,
    phi: Option<&SensingDesign>,
    psi0: Dictionary,
    config: &TrainConfig,
) -> Result<(Dictionary, Diagnostics)> {
    let mut learner = OnlineLearner::new(data, phi, psi0, config)?;
    for _ in 0..config.iter_dic {
        learner.step()?;
    }
    Ok(learner.finish())
}
