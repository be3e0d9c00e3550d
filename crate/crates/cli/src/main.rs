//! `smsd`: build patch corpora, learn sensing matrices and dictionaries,
//! reconstruct and score test images.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use smsd::dictionary::{sample_initial_dictionary, train_dictionary_online};
use smsd::joint::{train_joint, Checkpoints};
use smsd::metrics::{comparison_csv, comparison_table, evaluate_cs_system, EvaluationReport};
use smsd::model::io::{load_matrix, save_matrix};
use smsd::patches::{assemble_patches, extract_patches, load_image, save_image, PatchDataset};
use smsd::sensing::{design_sensing, gram_residual};
use smsd::sparse::decode_measurements;
use smsd::{Diagnostics, Dictionary, TrainConfig};

use config::{resolve, TrainFlags};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<smsd::Error> for Failure {
    fn from(e: smsd::Error) -> Self {
        if matches!(e, smsd::Error::InvalidConfig { .. }) {
            Failure::Usage(e.to_string())
        } else if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "smsd", version, about = "Joint sensing matrix and dictionary learning")]
struct Cli {
    /// Threads used for sparse coding (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tile images into non-overlapping patches and save the corpus.
    ExtractPatches {
        /// Image files or directories of PNG/PGM images.
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        patch_size: usize,
        /// Keep this many randomly chosen patches per image.
        #[arg(long)]
        sample_per_image: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        mean_removal: bool,
    },
    /// Alternate sensing design and online dictionary learning.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        /// Start from this dictionary instead of sampled training patches.
        #[arg(long)]
        psi0: Option<PathBuf>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Dictionary only (no projection term) for iter_sendic x iter_dic
    /// iterations, then a sensing matrix designed for the result.
    TrainDict {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        psi0: Option<PathBuf>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Closed-form sensing matrix for a dictionary.
    DesignSensing {
        #[arg(long)]
        psi: PathBuf,
        #[arg(long, short, default_value_t = 20)]
        measurements: usize,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Measure and decode a corpus; writes reconstructed patches and images.
    Reconstruct {
        #[arg(long)]
        phi: PathBuf,
        #[arg(long)]
        psi: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, short = 'k', default_value_t = 4)]
        sparsity: usize,
    },
    /// Score one or more systems on a test corpus.
    Evaluate {
        /// `LABEL=PHI,PSI` (repeatable).
        #[arg(long = "system", required = true, value_parser = parse_system)]
        systems: Vec<SystemSpec>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, short = 'k', default_value_t = 4)]
        sparsity: usize,
        /// Also write the table as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Moving averages and dictionary-change envelopes of a run's traces.
    Diagnose {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value_t = 50)]
        window: usize,
        /// Defaults to RUN_DIR/traces.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone)]
struct SystemSpec {
    label: String,
    phi: PathBuf,
    psi: PathBuf,
}

fn parse_system(s: &str) -> Result<SystemSpec, String> {
    let (label, rest) = s.split_once('=').ok_or("expected LABEL=PHI,PSI")?;
    let (phi, psi) = rest.split_once(',').ok_or("expected LABEL=PHI,PSI")?;
    Ok(SystemSpec {
        label: label.to_string(),
        phi: phi.into(),
        psi: psi.into(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("usage error: --workers must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::ExtractPatches {
            images,
            out,
            patch_size,
            sample_per_image,
            seed,
            mean_removal,
        } => extract(&images, &out, patch_size, sample_per_image, seed, mean_removal),
        Command::Train {
            corpus,
            run_dir,
            psi0,
            flags,
        } => train(&corpus, &run_dir, psi0.as_deref(), &flags),
        Command::TrainDict {
            corpus,
            run_dir,
            psi0,
            flags,
        } => train_dict(&corpus, &run_dir, psi0.as_deref(), &flags),
        Command::DesignSensing {
            psi,
            measurements,
            out,
        } => {
            let psi = load_dictionary(&psi)?;
            let design = design_sensing(&psi, measurements)?;
            let report = gram_residual(design.phi(), &psi)?;
            save_matrix(design.phi(), &out)?;
            println!(
                "gram residual {:.6} (minimum {}, gap {:.3e})",
                report.value, report.theoretical_min, report.gap
            );
            Ok(())
        }
        Command::Reconstruct {
            phi,
            psi,
            corpus,
            out_dir,
            sparsity,
        } => reconstruct(&phi, &psi, &corpus, &out_dir, sparsity),
        Command::Evaluate {
            systems,
            corpus,
            sparsity,
            csv,
        } => evaluate(&systems, &corpus, sparsity, csv.as_deref()),
        Command::Diagnose {
            run_dir,
            window,
            out,
        } => diagnose(&run_dir, window, out),
    }
}

fn image_paths(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "pnm"))
                })
                .collect();
            found.sort();
            paths.extend(found);
        } else {
            paths.push(p.clone());
        }
    }
    if paths.is_empty() {
        return Err(Failure::Usage("no images found".into()));
    }
    Ok(paths)
}

fn extract(
    inputs: &[PathBuf],
    out: &Path,
    patch_size: usize,
    sample: Option<usize>,
    seed: u64,
    mean_removal: bool,
) -> CliResult {
    if patch_size == 0 {
        return Err(Failure::Usage("--patch-size must be positive".into()));
    }
    let paths = image_paths(inputs)?;
    let parts: Vec<PatchDataset> = paths
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let img = load_image(p)?;
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            extract_patches(&img, name, patch_size, sample, &mut rng)
        })
        .collect::<smsd::Result<_>>()?;
    let mut corpus = PatchDataset::concat(parts)?;
    if mean_removal {
        corpus.remove_means();
    }
    ensure_parent(out)?;
    corpus.save(out)?;
    println!(
        "{} patches of {}x{} from {} images -> {}",
        corpus.len(),
        patch_size,
        patch_size,
        corpus.images.len(),
        out.display()
    );
    Ok(())
}

fn ensure_parent(path: &Path) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::Data(format!("{}: {e}", parent.display())))?;
    }
    Ok(())
}

fn load_dictionary(path: &Path) -> CliResult<Dictionary> {
    Ok(Dictionary::normalized(load_matrix(path)?)?)
}

/// Loads the corpus, honouring the configured mean removal and patch size.
fn training_data(corpus: &Path, config: &TrainConfig) -> CliResult<DMatrix<f64>> {
    let mut data = PatchDataset::load(corpus)?;
    if data.patch_size != config.patch_size {
        return Err(Failure::Usage(format!(
            "corpus has {}x{} patches but patch_size is {}",
            data.patch_size, data.patch_size, config.patch_size
        )));
    }
    if config.mean_removal {
        data.remove_means();
    } else if data.mean_removed() {
        log::warn!("corpus was extracted with mean removal; training on mean-removed patches");
    }
    Ok(data.columns)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn echo_config(run_dir: &Path, config: &TrainConfig) -> CliResult {
    fs::create_dir_all(run_dir).map_err(|e| Failure::Data(format!("{}: {e}", run_dir.display())))?;
    let text = serde_json::to_string_pretty(config).map_err(|e| Failure::Data(e.to_string()))?;
    write_text(&run_dir.join("config.json"), &text)
}

fn train(corpus: &Path, run_dir: &Path, psi0: Option<&Path>, flags: &TrainFlags) -> CliResult {
    let config = resolve(flags)?;
    echo_config(run_dir, &config)?;
    let data = training_data(corpus, &config)?;
    let psi0 = psi0.map(load_dictionary).transpose()?;
    let checkpoints = Checkpoints::new(run_dir)?;
    let run = train_joint(&data, &config, psi0, Some(&checkpoints))?;
    save_matrix(run.design.phi(), run_dir.join("phi.smsd"))?;
    save_matrix(run.dictionary.matrix(), run_dir.join("psi.smsd"))?;
    let outer = &run.diagnostics.outer_objectives;
    println!(
        "trained {} outer steps; probe objective {:.4} -> {:.4}; artifacts in {}",
        outer.len(),
        outer.first().copied().unwrap_or(f64::NAN),
        outer.last().copied().unwrap_or(f64::NAN),
        run_dir.display()
    );
    Ok(())
}

fn train_dict(corpus: &Path, run_dir: &Path, psi0: Option<&Path>, flags: &TrainFlags) -> CliResult {
    let config = resolve(flags)?;
    echo_config(run_dir, &config)?;
    let data = training_data(corpus, &config)?;
    let psi0 = match psi0 {
        Some(p) => load_dictionary(p)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            sample_initial_dictionary(&data, config.atoms, &mut rng)?
        }
    };
    let inner = TrainConfig {
        iter_dic: config.iter_dic * config.iter_sendic,
        ..config.clone()
    };
    let (psi, diag) = train_dictionary_online(&data, None, psi0, &inner)?;
    let design = design_sensing(&psi, config.measurements)?;
    save_matrix(psi.matrix(), run_dir.join("psi.smsd"))?;
    save_matrix(design.phi(), run_dir.join("phi.smsd"))?;
    write_text(&run_dir.join("diagnostics.csv"), &diag.to_csv())?;
    println!(
        "trained {} iterations without projection; artifacts in {}",
        diag.len(),
        run_dir.display()
    );
    Ok(())
}

fn reconstruct(phi: &Path, psi: &Path, corpus: &Path, out_dir: &Path, sparsity: usize) -> CliResult {
    let phi = load_matrix(phi)?;
    let psi = load_dictionary(psi)?;
    let test = PatchDataset::load(corpus)?;
    let y = &phi * &test.columns;
    let (_, xhat) = decode_measurements(&y, &psi, &phi, sparsity, 0.0)?;
    let recon = test.with_columns(xhat)?;
    fs::create_dir_all(out_dir).map_err(|e| Failure::Data(format!("{}: {e}", out_dir.display())))?;
    recon.save(out_dir.join("reconstructed.smsd"))?;
    let mut written = 0;
    for (id, info) in recon.images.iter().enumerate() {
        match assemble_patches(&recon, id) {
            Ok(img) => {
                save_image(&img, out_dir.join(format!("{}.png", info.name)))?;
                written += 1;
            }
            Err(e) => log::warn!("skipping image {}: {e}", info.name),
        }
    }
    println!(
        "reconstructed {} patches, {written} images -> {}",
        recon.len(),
        out_dir.display()
    );
    Ok(())
}

fn evaluate(systems: &[SystemSpec], corpus: &Path, sparsity: usize, csv: Option<&Path>) -> CliResult {
    let test = PatchDataset::load(corpus)?;
    let reports: Vec<EvaluationReport> = systems
        .iter()
        .map(|s| {
            let phi = load_matrix(&s.phi)?;
            let psi = load_dictionary(&s.psi)?;
            Ok(evaluate_cs_system(&s.label, &phi, &psi, &test, sparsity)?)
        })
        .collect::<CliResult<_>>()?;
    print!("{}", comparison_table(&reports));
    if let Some(path) = csv {
        ensure_parent(path)?;
        write_text(path, &comparison_csv(&reports))?;
    }
    Ok(())
}

fn read_diagnostics(path: &Path) -> CliResult<Diagnostics> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let mut d = Diagnostics::default();
    for (n, line) in text.lines().enumerate().skip(1) {
        let bad = || Failure::Data(format!("{}:{}: malformed row", path.display(), n + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        d.batch_objective.push(f[1].parse().map_err(|_| bad())?);
        d.dict_diff.push(f[2].parse().map_err(|_| bad())?);
        d.atoms_replaced.push(f[3].parse().map_err(|_| bad())?);
    }
    Ok(d)
}

fn diagnose(run_dir: &Path, window: usize, out: Option<PathBuf>) -> CliResult {
    if window == 0 {
        return Err(Failure::Usage("--window must be positive".into()));
    }
    let d = read_diagnostics(&run_dir.join("diagnostics.csv"))?;
    let mut text = String::from("iteration,batchObjective,movingAverage,dictDiff,diffEnvelope\n");
    for t in 0..d.len() {
        let lo = (t + 1).saturating_sub(window);
        let avg = d.batch_objective[lo..=t].iter().sum::<f64>() / (t + 1 - lo) as f64;
        let env = d.dict_diff[lo..=t].iter().copied().fold(0.0, f64::max);
        text.push_str(&format!(
            "{},{},{avg},{},{env}\n",
            t + 1,
            d.batch_objective[t],
            d.dict_diff[t]
        ));
    }
    let out = out.unwrap_or_else(|| run_dir.join("traces.csv"));
    ensure_parent(&out)?;
    write_text(&out, &text)?;
    println!("{} iterations -> {}", d.len(), out.display());
    Ok(())
}
