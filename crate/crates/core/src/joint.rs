//! Alternating optimisation of the sensing matrix and the dictionary.
//!
//! Every outer step designs `Phi` in closed form for the current dictionary
//! and then runs the online learner with that `Phi` frozen.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::{projected_error, sample_initial_dictionary, OnlineLearner};
use crate::error::{Error, Result};
use crate::model::io::save_matrix;
use crate::model::{ensure_shape, Diagnostics, Dictionary, SensingDesign, SparseCodeBatch};
use crate::model::TrainConfig;
use crate::sensing::{design_sensing, gram_residual};
use crate::sparse::encode_train;

/// `gamma ||X - Psi Theta||_F^2 + ||Phi X - Phi Psi Theta||_F^2`.
pub fn objective_smsd(
    data: &DMatrix<f64>,
    psi: &Dictionary,
    phi: &DMatrix<f64>,
    codes: &SparseCodeBatch,
    gamma: f64,
) -> Result<f64> {
    ensure_shape(data, psi.signal_dim(), codes.column_count(), "data")?;
    ensure_shape(phi, phi.nrows(), psi.signal_dim(), "sensing matrix")?;
    let residual = data - codes.synthesize(psi.matrix());
    Ok(projected_error(&residual, phi, gamma))
}

/// `||A - B||_F`.
pub fn dictionary_diff(a: &Dictionary, b: &Dictionary) -> Result<f64> {
    ensure_shape(b.matrix(), a.signal_dim(), a.atom_count(), "dictionary")?;
    Ok((a.matrix() - b.matrix()).norm())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JointRunDiagnostics {
    /// Per outer step: objective per probe column, coded with the step's pair.
    pub outer_objectives: Vec<f64>,
    /// Per outer step: Gram residual minus its theoretical minimum.
    pub gram_gaps: Vec<f64>,
    /// Inner traces of all outer steps, concatenated.
    pub inner: Diagnostics,
}

impl JointRunDiagnostics {
    /// `outer,probeObjective,gramGap` rows, 1-based.
    pub fn outer_csv(&self) -> String {
        let mut out = String::from("outer,probeObjective,gramGap\n");
        for (i, (o, g)) in self.outer_objectives.iter().zip(&self.gram_gaps).enumerate() {
            out.push_str(&format!("{},{o},{g}\n", i + 1));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct JointRun {
    pub design: SensingDesign,
    pub dictionary: Dictionary,
    pub diagnostics: JointRunDiagnostics,
    /// Starting dictionary (given or sampled).
    pub initial: Dictionary,
    /// Columns of the input held out as probe set.
    pub probe_columns: Vec<usize>,
}

/// Where [`train_joint`] writes its per-step checkpoints.
#[derive(Debug, Clone)]
pub struct Checkpoints {
    pub dir: PathBuf,
}

impl Checkpoints {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))
    }

    fn save_step(
        &self,
        step: usize,
        design: &SensingDesign,
        psi: &Dictionary,
        diag: &JointRunDiagnostics,
    ) -> Result<()> {
        save_matrix(design.phi(), self.dir.join(format!("phi_{step}.smsd")))?;
        save_matrix(psi.matrix(), self.dir.join(format!("psi_{step}.smsd")))?;
        self.write("diagnostics.csv", &diag.inner.to_csv())?;
        self.write("outer.csv", &diag.outer_csv())
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }
}

/// Splits `cols` indices into `(train, probe)` with `round(fraction * cols)`
/// probe columns.
pub fn probe_split(cols: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..cols).collect();
    order.shuffle(rng);
    let probe_len = ((fraction * cols as f64).round() as usize).min(cols);
    let mut probe = order.split_off(cols - probe_len);
    order.sort_unstable();
    probe.sort_unstable();
    (order, probe)
}

/// Runs `config.iter_sendic` outer steps from `psi0`, or from `config.atoms`
/// training columns drawn at random when `psi0` is `None`.
pub fn train_joint(
    data: &DMatrix<f64>,
    config: &TrainConfig,
    psi0: Option<Dictionary>,
    checkpoints: Option<&Checkpoints>,
) -> Result<JointRun> {
    config.validate()?;
    if data.nrows() != config.signal_dim() {
        return Err(Error::ShapeMismatch(format!(
            "data has {} rows, patch size {} implies {}",
            data.nrows(),
            config.patch_size,
            config.signal_dim()
        )));
    }
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    master.set_stream(2);
    let (train_idx, probe_idx) = probe_split(data.ncols(), config.probe_fraction, &mut master);
    let train = data.select_columns(&train_idx);
    let probe = data.select_columns(&probe_idx);
    if config.batch_size > train.ncols() {
        return Err(Error::config(
            "batch_size",
            format!(
                "batch of {} exceeds the {} training columns left after the probe split",
                config.batch_size,
                train.ncols()
            ),
        ));
    }

    let mut psi = match psi0 {
        Some(p) => {
            ensure_shape(p.matrix(), config.signal_dim(), config.atoms, "initial dictionary")?;
            p
        }
        None => sample_initial_dictionary(&train, config.atoms, &mut master)?,
    };
    if let Some(c) = checkpoints {
        let path = c.dir.join("config.json");
        let text = serde_json::to_string_pretty(config)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        save_matrix(psi.matrix(), c.dir.join("psi_0.smsd"))?;
    }

    let initial = psi.clone();
    let mut diag = JointRunDiagnostics::default();
    let mut design = None;
    for step in 1..=config.iter_sendic {
        let d = design_sensing(&psi, config.measurements)?;
        let report = gram_residual(d.phi(), &psi)?;
        diag.gram_gaps.push(report.gap);

        let inner = TrainConfig {
            seed: master.next_u64(),
            ..config.clone()
        };
        let mut learner = OnlineLearner::new(&train, Some(&d), psi, &inner)?;
        for _ in 0..config.iter_dic {
            learner.step()?;
        }
        let (next, inner_diag) = learner.finish();
        psi = next;
        diag.inner.extend(&inner_diag);

        let probe_obj = if probe.ncols() > 0 {
            let codes = encode_train(&probe, &psi, d.phi(), config.gamma, config.sparsity)?;
            objective_smsd(&probe, &psi, d.phi(), &codes, config.gamma)? / probe.ncols() as f64
        } else {
            f64::NAN
        };
        diag.outer_objectives.push(probe_obj);
        log::info!(
            "outer step {step}/{}: probe objective {probe_obj:.6}, last batch objective {:.6}",
            config.iter_sendic,
            inner_diag.batch_objective.last().copied().unwrap_or(f64::NAN)
        );
        if let Some(c) = checkpoints {
            c.save_step(step, &d, &psi, &diag)?;
        }
        design = Some(d);
    }

    Ok(JointRun {
        design: design.expect("iter_sendic is validated positive"),
        dictionary: psi,
        diagnostics: diag,
        initial,
        probe_columns: probe_idx,
    })
}
