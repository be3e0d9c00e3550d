use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a dictionary column is moved to its new position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateMode {
    /// `u_j = psi_j + (b_j - Psi a_j) / A(j,j)`, the zero of the column gradient.
    #[default]
    FixedPoint,
    /// The Xi1/Xi2 expression of the block-coordinate update as printed.
    LiteralPaper,
}

impl std::str::FromStr for UpdateMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fixed-point" => Ok(UpdateMode::FixedPoint),
            "literal-paper" => Ok(UpdateMode::LiteralPaper),
            other => Err(format!(
                "unknown update mode `{other}` (expected fixed-point or literal-paper)"
            )),
        }
    }
}

/// Hyperparameters of the joint learner. Defaults are the published settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the plain representation error against the projected one.
    pub gamma: f64,
    /// Mini-batch width.
    #[serde(alias = "eta")]
    pub batch_size: usize,
    /// Maximum non-zeros per code.
    #[serde(alias = "k")]
    pub sparsity: usize,
    /// Forgetting exponent in `(1 - 1/t)^rho`.
    pub rho: f64,
    /// Inner (online dictionary) iterations per outer step.
    pub iter_dic: usize,
    /// Outer (sensing design + dictionary) iterations.
    pub iter_sendic: usize,
    #[serde(alias = "m")]
    pub measurements: usize,
    #[serde(alias = "l")]
    pub atoms: usize,
    pub seed: u64,
    /// Column sweeps per dictionary update.
    pub dict_update_passes: usize,
    pub update_mode: UpdateMode,
    pub mean_removal: bool,
    /// Iterations between unused-atom replacement sweeps; 0 disables them.
    pub replace_every: usize,
    /// Fraction of the corpus held out as probe set by the joint trainer.
    pub probe_fraction: f64,
    pub patch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0 / 32.0,
            batch_size: 128,
            sparsity: 4,
            rho: 2.0,
            iter_dic: 1000,
            iter_sendic: 10,
            measurements: 20,
            atoms: 256,
            seed: 0,
            dict_update_passes: 1,
            update_mode: UpdateMode::FixedPoint,
            mean_removal: false,
            replace_every: 100,
            probe_fraction: 0.05,
            patch_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn signal_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Checks every bound; returns the first violation keyed by field name.
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", format!("must be > 0, got {}", self.gamma)));
        }
        if self.gamma > 1.0 {
            log::warn!("gamma = {} lies outside (0, 1]", self.gamma);
        }
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("sparsity", self.sparsity),
            ("iter_dic", self.iter_dic),
            ("iter_sendic", self.iter_sendic),
            ("measurements", self.measurements),
            ("atoms", self.atoms),
            ("dict_update_passes", self.dict_update_passes),
            ("patch_size", self.patch_size),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::config("rho", format!("must be >= 0, got {}", self.rho)));
        }
        if !(0.0..1.0).contains(&self.probe_fraction) {
            return Err(Error::config(
                "probe_fraction",
                format!("must lie in [0, 1), got {}", self.probe_fraction),
            ));
        }
        if self.sparsity > self.measurements {
            log::warn!(
                "sparsity {} exceeds the number of measurements {}",
                self.sparsity,
                self.measurements
            );
        }
        Ok(())
    }
}
