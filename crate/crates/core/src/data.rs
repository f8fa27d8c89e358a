//! Labeled image datasets: IDX (MNIST) ingestion, multi-scale resizing and
//! a seeded synthetic blob generator.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::resize_bilinear;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images `[n, C, H, W]` in `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(images: Array4<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.dim().0 != labels.len() {
            return Err(Error::CountMismatch {
                images: images.dim().0,
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelRange {
                label,
                classes: class_count,
            });
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)`.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.images.dim();
        (c, h, w)
    }

    /// Contiguous range of samples.
    pub fn slice(&self, range: std::ops::Range<usize>) -> LabeledDataset {
        let end = range.end.min(self.len());
        let start = range.start.min(end);
        LabeledDataset {
            images: self.images.slice(s![start..end, .., .., ..]).to_owned(),
            labels: self.labels[start..end].to_vec(),
            class_count: self.class_count,
        }
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> (Array4<f64>, Vec<usize>) {
        (
            self.images.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::IdxTruncated {
            path: path.to_path_buf(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = read_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

/// Reads an IDX3 image file; returns `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    check_magic(&bytes, IDX_IMAGES_MAGIC, path)?;
    let n = read_u32(&bytes, 4, path)? as usize;
    let rows = read_u32(&bytes, 8, path)? as usize;
    let cols = read_u32(&bytes, 12, path)? as usize;
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() < need {
        return Err(Error::IdxTruncated {
            path: path.to_path_buf(),
        });
    }
    Ok((n, rows, cols, body[..need].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    check_magic(&bytes, IDX_LABELS_MAGIC, path)?;
    let n = read_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::IdxTruncated {
            path: path.to_path_buf(),
        });
    }
    Ok(body[..n].to_vec())
}

/// Loads an MNIST-style image/label IDX pair with ten classes.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let (n, rows, cols, pixels) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let images = Array4::from_shape_vec((n, 1, rows, cols), pixels)
        .expect("pixel count checked")
        .mapv(|p| p as f64 / 255.0);
    LabeledDataset::new(images, labels.into_iter().map(usize::from).collect(), 10)
}

/// Loads `<prefix>-images-idx3-ubyte` / `<prefix>-labels-idx1-ubyte` from `dir`.
pub fn load_mnist_split(dir: &Path, prefix: &str) -> Result<LabeledDataset> {
    load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.write_all(&v.to_be_bytes()).expect("vec write");
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Every image resized by `factor`, labels unchanged.
pub fn make_multiscale(ds: &LabeledDataset, factor: f64) -> Result<LabeledDataset> {
    let (c, h, w) = ds.image_dims();
    if ds.is_empty() {
        return Err(Error::Resample("empty dataset".into()));
    }
    let first = resize_bilinear(ds.images.index_axis(Axis(0), 0), factor)?;
    let (_, oh, ow) = first.dim();
    let mut images = Array4::zeros((ds.len(), c, oh, ow));
    images.index_axis_mut(Axis(0), 0).assign(&first);
    for i in 1..ds.len() {
        let img = if (oh, ow) == (h, w) {
            ds.images.index_axis(Axis(0), i).to_owned()
        } else {
            resize_bilinear(ds.images.index_axis(Axis(0), i), factor)?
        };
        images.index_axis_mut(Axis(0), i).assign(&img);
    }
    Ok(LabeledDataset {
        images,
        labels: ds.labels.clone(),
        class_count: ds.class_count,
    })
}

/// Parameters of the synthetic blob-counting task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobConfig {
    /// Blob standard deviation at scale 1, in pixels.
    pub radius: f64,
    /// Peak intensity of each blob above the background.
    pub amplitude: f64,
    pub background: f64,
    /// Standard deviation of white noise drawn on the base grid and
    /// resized with the image.
    pub noise: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            radius: 1.5,
            amplitude: 1.0,
            background: 0.0,
            noise: 0.0,
        }
    }
}

impl BlobConfig {
    /// Small dim blobs in noise. Without noise the task is solved at any
    /// scale and sigma has no reason to move.
    pub fn noisy() -> Self {
        BlobConfig {
            radius: 1.0,
            amplitude: 0.5,
            background: 0.3,
            noise: 0.3,
        }
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Two-class blob dataset with [`BlobConfig::default`].
pub fn synth_blobs(n: usize, image_size: usize, scale_factor: f64, seed: u64) -> Result<LabeledDataset> {
    synth_blobs_with(n, image_size, scale_factor, seed, &BlobConfig::default())
}

/// Class 0 holds one isotropic Gaussian blob, class 1 holds two, each of
/// standard deviation `radius * scale_factor`. Images are
/// `round(image_size * scale_factor)` pixels square and blob positions are
/// drawn in base coordinates and scaled, so datasets that share a seed are
/// resized copies of one another. Labels alternate 0, 1, 0, ...
pub fn synth_blobs_with(
    n: usize,
    image_size: usize,
    scale_factor: f64,
    seed: u64,
    config: &BlobConfig,
) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs at least one sample".into()));
    }
    if !(scale_factor.is_finite() && scale_factor > 0.0) {
        return Err(Error::Config(format!("scale factor must be positive, got {scale_factor}")));
    }
    let size = (image_size as f64 * scale_factor).round() as usize;
    let radius = config.radius * scale_factor;
    // Centres keep a 2.5 sigma margin from every edge, in base coordinates.
    let margin = 2.5 * config.radius;
    let base = image_size as f64;
    if base - 2.0 * margin < 1.0 || size == 0 {
        return Err(Error::BlobFit { radius, size });
    }
    let min_sep = 4.0 * config.radius;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Array4::zeros((n, 1, size, size));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let mut centres: Vec<(f64, f64)> = Vec::with_capacity(2);
        let mut attempts = 0;
        while centres.len() < label + 1 {
            attempts += 1;
            if attempts > MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::BlobFit { radius, size });
            }
            let c = (
                rng.random_range(margin..base - margin),
                rng.random_range(margin..base - margin),
            );
            if centres
                .iter()
                .all(|p| (p.0 - c.0).hypot(p.1 - c.1) >= min_sep)
            {
                centres.push(c);
            }
        }
        let mut img = images.slice_mut(s![i, 0, .., ..]);
        for (y, x) in &centres {
            // Pixel k covers [k, k + 1) in base units / scale; its centre is
            // at (k + 0.5) / scale.
            let (cy, cx) = (y * scale_factor - 0.5, x * scale_factor - 0.5);
            for ((py, px), v) in img.indexed_iter_mut() {
                let d2 = (py as f64 - cy).powi(2) + (px as f64 - cx).powi(2);
                let b = config.amplitude * (-d2 / (2.0 * radius * radius)).exp();
                *v = f64::max(*v, b);
            }
        }
        let noise = Array3::from_shape_simple_fn((1, image_size, image_size), || {
            config.noise * rng.sample::<f64, _>(StandardNormal)
        });
        let noise = resize_bilinear(noise.view(), scale_factor)?;
        img.zip_mut_with(&noise.slice(s![0, .., ..]), |v, n| {
            *v = (config.background + *v + n).clamp(0.0, 1.0)
        });
        labels.push(label);
    }
    LabeledDataset::new(images, labels, 2)
}

/// Deterministic permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}
