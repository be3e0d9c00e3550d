//! Reconstruction quality: MSE, PSNR, SSIM and end-to-end scoring of a
//! sensing matrix / dictionary pair on held-out patches.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dictionary;
use crate::patches::{assemble_patches, PatchDataset};
use crate::sparse::decode_measurements;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);
/// Reconstruction MSE at or below this (rms error 1e-9 grey levels) is
/// round-off and scored as exact.
pub const EXACT_MSE: f64 = 1e-18;

fn same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean squared entry-wise difference.
pub fn mse(x: &DMatrix<f64>, xhat: &DMatrix<f64>) -> Result<f64> {
    same_shape(x, xhat)?;
    if x.is_empty() {
        return Err(Error::invalid("cannot score an empty matrix"));
    }
    Ok((xhat - x).norm_squared() / x.len() as f64)
}

/// `10 log10((2^bits - 1)^2 / mse)`; `f64::INFINITY` when `mse == 0`.
pub fn psnr_from_mse(mse: f64, bits: u32) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    let peak = (2f64.powi(bits as i32) - 1.0).powi(2);
    10.0 * (peak / mse).log10()
}

pub fn psnr(x: &DMatrix<f64>, xhat: &DMatrix<f64>, bits: u32) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, xhat)?, bits))
}

fn gaussian_kernel() -> DVector<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g = DVector::from_fn(SSIM_WINDOW, |i, _| {
        let d = i as f64 - half;
        (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let total = g.sum();
    g / total
}

/// Separable "valid" filtering with `g g^T`.
fn filter_valid(img: &DMatrix<f64>, g: &DVector<f64>) -> DMatrix<f64> {
    let w = g.len();
    let (h, wd) = img.shape();
    let rows = DMatrix::from_fn(h - w + 1, wd, |r, c| {
        (0..w).map(|k| g[k] * img[(r + k, c)]).sum::<f64>()
    });
    DMatrix::from_fn(h - w + 1, wd - w + 1, |r, c| {
        (0..w).map(|k| g[k] * rows[(r, c + k)]).sum::<f64>()
    })
}

/// Mean local SSIM over all fully contained 11x11 Gaussian windows
/// (sigma 1.5) with the 8-bit stabilisers `C1 = (0.01 * 255)^2`,
/// `C2 = (0.03 * 255)^2`.
pub fn ssim(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    same_shape(a, b)?;
    if a.nrows() < SSIM_WINDOW || a.ncols() < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            a.nrows(),
            a.ncols()
        )));
    }
    let g = gaussian_kernel();
    let mu_a = filter_valid(a, &g);
    let mu_b = filter_valid(b, &g);
    let aa = filter_valid(&a.component_mul(a), &g);
    let bb = filter_valid(&b.component_mul(b), &g);
    let ab = filter_valid(&a.component_mul(b), &g);
    let map = DMatrix::from_fn(mu_a.nrows(), mu_a.ncols(), |r, c| {
        let (ma, mb) = (mu_a[(r, c)], mu_b[(r, c)]);
        let va = aa[(r, c)] - ma * ma;
        let vb = bb[(r, c)] - mb * mb;
        let cov = ab[(r, c)] - ma * mb;
        ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
    });
    Ok(map.mean())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub label: String,
    /// Over every pixel of every test patch.
    pub psnr: f64,
    pub mse: f64,
    /// Mean of the per-image SSIM values, when any image could be assembled.
    pub ssim: Option<f64>,
    pub per_patch_psnr: Vec<f64>,
    /// Images whose tiling is complete in the test set.
    pub per_image: Vec<ImageScore>,
}

impl EvaluationReport {
    /// Share of patches reconstructed exactly.
    pub fn exact_fraction(&self) -> f64 {
        let exact = self.per_patch_psnr.iter().filter(|p| p.is_infinite()).count();
        exact as f64 / self.per_patch_psnr.len().max(1) as f64
    }

    /// `image,psnr,ssim` rows followed by an `Averaged` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,psnr,ssim\n");
        for s in &self.per_image {
            let _ = writeln!(out, "{},{},{}", s.name, s.psnr, fmt_opt(s.ssim));
        }
        let _ = writeln!(out, "Averaged,{},{}", self.psnr, fmt_opt(self.ssim));
        out
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Measures `y = Phi x` for every test patch, decodes with `K`-sparse OMP
/// over `Phi Psi` and scores the result against the originals.
pub fn evaluate_cs_system(
    label: &str,
    phi: &DMatrix<f64>,
    psi: &Dictionary,
    test: &PatchDataset,
    sparsity: usize,
) -> Result<EvaluationReport> {
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let y = phi * &test.columns;
    let (_, xhat) = decode_measurements(&y, psi, phi, sparsity, 0.0)?;
    let recon = test.with_columns(xhat)?;
    let (x_raw, xhat_raw) = (test.raw_columns(), recon.raw_columns());

    let mse_all = mse(&x_raw, &xhat_raw)?;
    let n = x_raw.nrows() as f64;
    let per_patch_psnr = x_raw
        .column_iter()
        .zip(xhat_raw.column_iter())
        .map(|(a, b)| psnr_from_mse(snap((b - a).norm_squared() / n), 8))
        .collect();

    let mut per_image = Vec::new();
    for (id, info) in test.images.iter().enumerate() {
        let (Ok(orig), Ok(rec)) = (assemble_patches(test, id), assemble_patches(&recon, id)) else {
            continue;
        };
        per_image.push(ImageScore {
            name: info.name.clone(),
            psnr: psnr(&orig, &rec, 8)?,
            ssim: ssim(&orig, &rec).ok(),
        });
    }
    let ssims: Vec<f64> = per_image.iter().filter_map(|s| s.ssim).collect();
    let ssim_mean = (!ssims.is_empty()).then(|| ssims.iter().sum::<f64>() / ssims.len() as f64);

    Ok(EvaluationReport {
        label: label.to_string(),
        psnr: psnr_from_mse(snap(mse_all), 8),
        mse: mse_all,
        ssim: ssim_mean,
        per_patch_psnr,
        per_image,
    })
}

fn snap(mse: f64) -> f64 {
    if mse <= EXACT_MSE {
        0.0
    } else {
        mse
    }
}

/// Side-by-side text table: one row per image, a `PSNR | SSIM` column pair
/// per system, and an `Averaged` row (mean over images, falling back to the
/// patch-level PSNR when no image could be assembled).
pub fn comparison_table(reports: &[EvaluationReport]) -> String {
    let names = image_names(reports);
    let mut out = String::new();
    let _ = write!(out, "{:<16}", "Image");
    for r in reports {
        let _ = write!(out, " | {:^17}", truncate(&r.label, 17));
    }
    out.push('\n');
    let _ = write!(out, "{:<16}", "");
    for _ in reports {
        let _ = write!(out, " | {:>8} {:>8}", "PSNR", "SSIM");
    }
    out.push('\n');
    let rule = 16 + reports.len() * 20;
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for name in &names {
        let _ = write!(out, "{:<16}", truncate(name, 16));
        for r in reports {
            let score = r.per_image.iter().find(|s| &s.name == name);
            let _ = write!(
                out,
                " | {:>8} {:>8}",
                score.map(|s| fmt_db(s.psnr)).unwrap_or_default(),
                score.and_then(|s| s.ssim).map(|v| format!("{v:.4}")).unwrap_or_default()
            );
        }
        out.push('\n');
    }
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    let _ = write!(out, "{:<16}", "Averaged");
    for r in reports {
        let (p, s) = averaged(r);
        let _ = write!(
            out,
            " | {:>8} {:>8}",
            fmt_db(p),
            s.map(|v| format!("{v:.4}")).unwrap_or_default()
        );
    }
    out.push('\n');
    out
}

/// CSV counterpart of [`comparison_table`].
pub fn comparison_csv(reports: &[EvaluationReport]) -> String {
    let mut out = String::from("image");
    for r in reports {
        let _ = write!(out, ",{0} psnr,{0} ssim", r.label);
    }
    out.push('\n');
    for name in image_names(reports) {
        out.push_str(&name);
        for r in reports {
            match r.per_image.iter().find(|s| s.name == name) {
                Some(s) => {
                    let _ = write!(out, ",{},{}", s.psnr, fmt_opt(s.ssim));
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out.push_str("Averaged");
    for r in reports {
        let (p, s) = averaged(r);
        let _ = write!(out, ",{p},{}", fmt_opt(s));
    }
    out.push('\n');
    out
}

fn averaged(r: &EvaluationReport) -> (f64, Option<f64>) {
    if r.per_image.is_empty() {
        return (r.psnr, r.ssim);
    }
    let p = r.per_image.iter().map(|s| s.psnr).sum::<f64>() / r.per_image.len() as f64;
    (p, r.ssim)
}

fn image_names(reports: &[EvaluationReport]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for r in reports {
        for s in &r.per_image {
            if !names.contains(&s.name) {
                names.push(s.name.clone());
            }
        }
    }
    names
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
