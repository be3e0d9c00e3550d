//! Image ingestion and non-overlapping patch corpora.
//!
//! Images are `height x width` matrices of 0-255 intensities. A patch is
//! vectorised column-major: entry `c * size + r` holds pixel `(r, c)` of the
//! block.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, Luma};
use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::io::{load_matrix, save_matrix};

/// Top-left pixel of a patch within image `image`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub image: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub name: String,
    pub height: usize,
    pub width: usize,
}

/// Patches as columns of an `N x P` matrix, `N = patch_size^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    pub columns: DMatrix<f64>,
    pub patch_size: usize,
    pub provenance: Vec<PatchOrigin>,
    pub images: Vec<ImageInfo>,
    /// Per-patch means, present when they have been subtracted.
    pub means: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    patch_size: usize,
    images: Vec<ImageInfo>,
    provenance: Vec<PatchOrigin>,
    means: Option<Vec<f64>>,
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.ncols() == 0
    }

    pub fn signal_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn mean_removed(&self) -> bool {
        self.means.is_some()
    }

    /// Subtracts each patch's mean from its pixels; a no-op if already done.
    pub fn remove_means(&mut self) {
        if self.means.is_some() {
            return;
        }
        let means: Vec<f64> = self.columns.column_iter().map(|c| c.mean()).collect();
        for (mut col, &m) in self.columns.column_iter_mut().zip(&means) {
            col.add_scalar_mut(-m);
        }
        self.means = Some(means);
    }

    /// Columns in raw intensity units (means added back if removed).
    pub fn raw_columns(&self) -> DMatrix<f64> {
        restore_means(&self.columns, self.means.as_deref())
    }

    /// Same provenance, different column contents (e.g. reconstructions).
    pub fn with_columns(&self, columns: DMatrix<f64>) -> Result<Self> {
        if columns.shape() != self.columns.shape() {
            return Err(Error::ShapeMismatch(format!(
                "replacement columns are {:?}, dataset is {:?}",
                columns.shape(),
                self.columns.shape()
            )));
        }
        Ok(Self {
            columns,
            ..self.clone()
        })
    }

    /// Keeps the listed columns, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            columns: self.columns.select_columns(indices),
            patch_size: self.patch_size,
            provenance: indices.iter().map(|&i| self.provenance[i]).collect(),
            images: self.images.clone(),
            means: self
                .means
                .as_ref()
                .map(|m| indices.iter().map(|&i| m[i]).collect()),
        }
    }

    /// Concatenates datasets, renumbering image ids.
    pub fn concat(parts: Vec<PatchDataset>) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("no datasets to concatenate"));
        };
        let patch_size = first.patch_size;
        let with_means = first.means.is_some();
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let mut columns = DMatrix::zeros(patch_size * patch_size, total);
        let mut provenance = Vec::with_capacity(total);
        let mut images = Vec::new();
        let mut means = with_means.then(Vec::new);
        let mut offset = 0;
        for part in parts {
            if part.patch_size != patch_size || part.means.is_some() != with_means {
                return Err(Error::invalid("datasets disagree on patch size or mean removal"));
            }
            let base = images.len();
            columns.columns_mut(offset, part.len()).copy_from(&part.columns);
            offset += part.len();
            provenance.extend(part.provenance.iter().map(|o| PatchOrigin {
                image: o.image + base,
                ..*o
            }));
            images.extend(part.images);
            if let (Some(all), Some(m)) = (means.as_mut(), part.means) {
                all.extend(m);
            }
        }
        Ok(Self {
            columns,
            patch_size,
            provenance,
            images,
            means,
        })
    }

    /// Writes the columns to `path` and provenance to `path` with a `.json` extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_matrix(&self.columns, path)?;
        let sidecar = Sidecar {
            patch_size: self.patch_size,
            images: self.images.clone(),
            provenance: self.provenance.clone(),
            means: self.means.clone(),
        };
        let side = path.with_extension("json");
        let file = File::create(&side).map_err(|e| Error::io(&side, e))?;
        serde_json::to_writer(BufWriter::new(file), &sidecar)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let columns = load_matrix(path)?;
        let side = path.with_extension("json");
        let file = File::open(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: Sidecar = serde_json::from_reader(BufReader::new(file))?;
        if columns.nrows() != sidecar.patch_size * sidecar.patch_size
            || columns.ncols() != sidecar.provenance.len()
        {
            return Err(Error::invalid(format!(
                "{}: matrix shape {:?} disagrees with its provenance sidecar",
                path.display(),
                columns.shape()
            )));
        }
        Ok(Self {
            columns,
            patch_size: sidecar.patch_size,
            provenance: sidecar.provenance,
            images: sidecar.images,
            means: sidecar.means,
        })
    }
}

fn restore_means(columns: &DMatrix<f64>, means: Option<&[f64]>) -> DMatrix<f64> {
    let mut out = columns.clone();
    if let Some(means) = means {
        for (mut col, &m) in out.column_iter_mut().zip(means) {
            col.add_scalar_mut(m);
        }
    }
    out
}

/// Tiles `image` into non-overlapping `patch_size` blocks, dropping the
/// right/bottom remainder. With `sample_per_image`, keeps that many blocks
/// drawn uniformly without replacement (in tiling order).
pub fn extract_patches<R: Rng + ?Sized>(
    image: &DMatrix<f64>,
    name: &str,
    patch_size: usize,
    sample_per_image: Option<usize>,
    rng: &mut R,
) -> Result<PatchDataset> {
    let (height, width) = image.shape();
    if patch_size == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    if height < patch_size || width < patch_size {
        return Err(Error::invalid(format!(
            "image {name} is {height}x{width}, smaller than one {patch_size}x{patch_size} patch"
        )));
    }
    let (block_rows, block_cols) = (height / patch_size, width / patch_size);
    let total = block_rows * block_cols;
    let blocks: Vec<usize> = match sample_per_image {
        Some(k) if k < total => {
            let mut picked = sample(rng, total, k).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..total).collect(),
    };

    let n = patch_size * patch_size;
    let mut columns = DMatrix::zeros(n, blocks.len());
    let mut provenance = Vec::with_capacity(blocks.len());
    for (k, &b) in blocks.iter().enumerate() {
        // Blocks are enumerated column-major over the block grid.
        let (row, col) = ((b % block_rows) * patch_size, (b / block_rows) * patch_size);
        let block = image.view((row, col), (patch_size, patch_size));
        columns.column_mut(k).copy_from_slice(block.clone_owned().as_slice());
        provenance.push(PatchOrigin { image: 0, row, col });
    }
    Ok(PatchDataset {
        columns,
        patch_size,
        provenance,
        images: vec![ImageInfo {
            name: name.to_string(),
            height,
            width,
        }],
        means: None,
    })
}

/// Rebuilds the tiled region of image `image_id`, clamping to `[0, 255]`.
pub fn assemble_patches(dataset: &PatchDataset, image_id: usize) -> Result<DMatrix<f64>> {
    let info = dataset
        .images
        .get(image_id)
        .ok_or_else(|| Error::invalid(format!("no image with id {image_id}")))?;
    let ps = dataset.patch_size;
    let (block_rows, block_cols) = (info.height / ps, info.width / ps);
    let raw = dataset.raw_columns();
    let mut out = DMatrix::zeros(block_rows * ps, block_cols * ps);
    let mut seen = vec![false; block_rows * block_cols];
    for (k, origin) in dataset.provenance.iter().enumerate() {
        if origin.image != image_id {
            continue;
        }
        if origin.row % ps != 0
            || origin.col % ps != 0
            || origin.row / ps >= block_rows
            || origin.col / ps >= block_cols
        {
            return Err(Error::invalid(format!(
                "patch {k} at ({}, {}) is off the tiling grid",
                origin.row, origin.col
            )));
        }
        seen[(origin.col / ps) * block_rows + origin.row / ps] = true;
        let patch = raw.column(k);
        let mut block = out.view_mut((origin.row, origin.col), (ps, ps));
        for c in 0..ps {
            for r in 0..ps {
                block[(r, c)] = patch[c * ps + r].clamp(0.0, 255.0);
            }
        }
    }
    let gaps: Vec<(usize, usize)> = seen
        .iter()
        .enumerate()
        .filter(|(_, &s)| !s)
        .map(|(b, _)| ((b % block_rows) * ps, (b / block_rows) * ps))
        .collect();
    if !gaps.is_empty() {
        return Err(Error::MissingPatches {
            image: image_id,
            gaps,
        });
    }
    Ok(out)
}

/// Endless stream of column-index batches over a shuffled order. Each epoch
/// visits a fresh permutation in contiguous slices of `batch` columns; a
/// short tail is skipped in favour of a reshuffle.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl BatchIterator {
    pub fn new(columns: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if batch > columns {
            return Err(Error::config(
                "batch_size",
                format!("batch of {batch} exceeds the {columns} available columns"),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..columns).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            cursor: 0,
            batch,
            epoch: 0,
            rng,
        })
    }

    /// Completed reshuffles so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_indices(&mut self) -> &[usize] {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let start = self.cursor;
        self.cursor += self.batch;
        &self.order[start..self.cursor]
    }

    pub fn next_batch(&mut self, data: &DMatrix<f64>) -> DMatrix<f64> {
        let idx = self.next_indices().to_vec();
        data.select_columns(&idx)
    }
}

/// Iterator adapter over a dataset's columns.
pub struct Batches<'a> {
    data: &'a DMatrix<f64>,
    inner: BatchIterator,
}

impl Iterator for Batches<'_> {
    type Item = DMatrix<f64>;

    fn next(&mut self) -> Option<DMatrix<f64>> {
        Some(self.inner.next_batch(self.data))
    }
}

pub fn batch_iterator(dataset: &PatchDataset, batch: usize, seed: u64) -> Result<Batches<'_>> {
    Ok(Batches {
        data: &dataset.columns,
        inner: BatchIterator::new(dataset.len(), batch, seed)?,
    })
}

/// Loads an 8-bit image as grey levels; colour is reduced with
/// `round(0.299 R + 0.587 G + 0.114 B)`.
pub fn load_image(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(to_gray(&img))
}

pub fn to_gray(img: &DynamicImage) -> DMatrix<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => {
            DMatrix::from_fn(h, w, |r, c| g.get_pixel(c as u32, r as u32)[0] as f64)
        }
        _ => {
            let rgb = img.to_rgb8();
            DMatrix::from_fn(h, w, |r, c| {
                let p = rgb.get_pixel(c as u32, r as u32);
                luma(p[0], p[1], p[2])
            })
        }
    }
}

pub fn luma(r: u8, g: u8, b: u8) -> f64 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round()
}

/// Saves as 8-bit grey PNG or PGM (by extension), rounding and clamping.
pub fn save_image(image: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = image.shape();
    let mut out = GrayImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            out.put_pixel(c as u32, r as u32, Luma([image[(r, c)].round().clamp(0.0, 255.0) as u8]));
        }
    }
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") | Some("pnm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    out.save_with_format(path, format).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
