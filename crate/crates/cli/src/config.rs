//! Layered configuration: built-in defaults, then an optional JSON/TOML
//! file, then command-line flags.

use std::fs;
use std::path::Path;

use clap::Args;
use smsd::{TrainConfig, UpdateMode};

use crate::Failure;

/// Every training hyperparameter as an optional override.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// JSON or TOML file with any subset of the training keys.
    #[arg(long, value_name = "FILE")]
    pub config: Option<std::path::PathBuf>,
    /// Weight of the plain representation error; accepts fractions like 1/32.
    #[arg(long, value_parser = parse_fraction)]
    pub gamma: Option<f64>,
    /// Mini-batch width.
    #[arg(long, alias = "eta")]
    pub batch_size: Option<usize>,
    /// Non-zeros per code.
    #[arg(long, short = 'k')]
    pub sparsity: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub iter_dic: Option<usize>,
    #[arg(long)]
    pub iter_sendic: Option<usize>,
    #[arg(long, short = 'm')]
    pub measurements: Option<usize>,
    #[arg(long, short = 'l')]
    pub atoms: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dict_update_passes: Option<usize>,
    /// fixed-point or literal-paper.
    #[arg(long)]
    pub update_mode: Option<UpdateMode>,
    #[arg(long)]
    pub mean_removal: Option<bool>,
    /// Iterations between unused-atom sweeps (0 disables).
    #[arg(long)]
    pub replace_every: Option<usize>,
    #[arg(long)]
    pub probe_fraction: Option<f64>,
    #[arg(long)]
    pub patch_size: Option<usize>,
}

pub fn parse_fraction(s: &str) -> Result<f64, String> {
    let parsed = match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|e| format!("{e}"))?;
            let d: f64 = d.trim().parse().map_err(|e| format!("{e}"))?;
            n / d
        }
        None => s.trim().parse().map_err(|e| format!("{e}"))?,
    };
    if parsed.is_finite() {
        Ok(parsed)
    } else {
        Err(format!("`{s}` is not a finite number"))
    }
}

fn read_file(path: &Path) -> Result<TrainConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    let parsed = if is_toml {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

/// Defaults, overridden by the file, overridden by flags; validated.
pub fn resolve(flags: &TrainFlags) -> Result<TrainConfig, Failure> {
    let mut c = match &flags.config {
        Some(path) => read_file(path)?,
        None => TrainConfig::default(),
    };
    macro_rules! take {
        ($($field:ident),*) => {
            $(if let Some(v) = flags.$field.clone() { c.$field = v; })*
        };
    }
    take!(
        gamma,
        batch_size,
        sparsity,
        rho,
        iter_dic,
        iter_sendic,
        measurements,
        atoms,
        seed,
        dict_update_passes,
        update_mode,
        mean_removal,
        replace_every,
        probe_fraction,
        patch_size
    );
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(ext: &str, body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn no_overrides_give_published_defaults() {
        let c = resolve(&TrainFlags::default()).unwrap();
        assert_eq!(c.patch_size, 8);
        assert_eq!(c.measurements, 20);
        assert_eq!(c.atoms, 256);
        assert_eq!(c.sparsity, 4);
        assert_eq!(c.gamma, 1.0 / 32.0);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.iter_dic, 1000);
        assert_eq!(c.iter_sendic, 10);
        assert_eq!(c.seed, 0);
    }

    #[test]
    fn flags_beat_file_beats_defaults() {
        let f = file(".json", r#"{"eta": 64, "rho": 3.0}"#);
        let flags = TrainFlags {
            config: Some(f.path().to_path_buf()),
            batch_size: Some(128),
            ..TrainFlags::default()
        };
        let c = resolve(&flags).unwrap();
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.rho, 3.0);
        assert_eq!(c.atoms, 256);
    }

    #[test]
    fn toml_files_are_read() {
        let f = file(".toml", "batch_size = 32\nupdate_mode = \"literal-paper\"\n");
        let c = resolve(&TrainFlags {
            config: Some(f.path().to_path_buf()),
            ..TrainFlags::default()
        })
        .unwrap();
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.update_mode, UpdateMode::LiteralPaper);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let f = file(".json", r#"{"gama": 0.5}"#);
        let err = resolve(&TrainFlags {
            config: Some(f.path().to_path_buf()),
            ..TrainFlags::default()
        })
        .unwrap_err();
        assert!(matches!(err, Failure::Usage(ref m) if m.contains("gama")), "{err:?}");
    }

    #[test]
    fn zero_gamma_names_the_key() {
        let err = resolve(&TrainFlags {
            gamma: Some(0.0),
            ..TrainFlags::default()
        })
        .unwrap_err();
        assert!(matches!(err, Failure::Usage(ref m) if m.contains("gamma")), "{err:?}");
    }

    #[test]
    fn fractions_parse() {
        assert_eq!(parse_fraction("1/32").unwrap(), 0.03125);
        assert_eq!(parse_fraction("0.5").unwrap(), 0.5);
        assert!(parse_fraction("1/0").is_err());
        assert!(parse_fraction("abc").is_err());
    }
}
