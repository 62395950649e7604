//! Datasets: MNIST IDX ingestion, area-weighted downsampling, input noise,
//! the float-addition task and seeded batching.

use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_SIDE: usize = 28;
pub const SMALL_SIDE: usize = 15;
pub const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    split: Split,
}

impl LabeledDataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, split: Split) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::shape("targets", inputs.len(), targets.len()));
        }
        if let Some(first) = inputs.first() {
            if let Some(bad) = inputs.iter().find(|x| x.len() != first.len()) {
                return Err(Error::shape("input", first.len(), bad.len()));
            }
        }
        if let Some(first) = targets.first() {
            if let Some(bad) = targets.iter().find(|y| y.len() != first.len()) {
                return Err(Error::shape("target", first.len(), bad.len()));
            }
        }
        Ok(LabeledDataset { inputs, targets, split })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.targets
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn target_dim(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    /// Borrowed `(input, target)` pairs for the given sample indices.
    pub fn pairs(&self, indices: &[usize]) -> Vec<(&[f64], &[f64])> {
        indices
            .iter()
            .map(|&i| (self.inputs[i].as_slice(), self.targets[i].as_slice()))
            .collect()
    }

    pub fn all_pairs(&self) -> Vec<(&[f64], &[f64])> {
        self.inputs
            .iter()
            .zip(&self.targets)
            .map(|(x, y)| (x.as_slice(), y.as_slice()))
            .collect()
    }

    /// First `n` samples (or all of them).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        LabeledDataset {
            inputs: self.inputs[..n].to_vec(),
            targets: self.targets[..n].to_vec(),
            split: self.split,
        }
    }

    pub fn map_inputs(&self, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Self> {
        let inputs = self.inputs.iter().map(|x| f(x)).collect::<Result<Vec<_>>>()?;
        LabeledDataset::new(inputs, self.targets.clone(), self.split)
    }
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format {
                file: path.display().to_string(),
                field: "gzip stream",
                detail: e.to_string(),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(bytes: &[u8], words: usize, file: &str) -> Result<Vec<u32>> {
    if bytes.len() < 4 * words {
        return Err(Error::Format {
            file: file.to_string(),
            field: "header",
            detail: format!("{} bytes, need {}", bytes.len(), 4 * words),
        });
    }
    Ok((0..words).map(|k| BigEndian::read_u32(&bytes[4 * k..])).collect())
}

/// Pixels scaled to `[0, 1]`, one row-major vector per image.
pub fn read_idx_images(path: &Path) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    let file = path.display().to_string();
    let bytes = read_maybe_gzip(path)?;
    let h = header(&bytes, 4, &file)?;
    if h[0] != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            file,
            field: "magic",
            detail: format!("expected {IDX_IMAGES_MAGIC:#010x}, got {:#010x}", h[0]),
        });
    }
    let (count, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    let pixels = rows * cols;
    let body = &bytes[16..];
    if body.len() != count * pixels {
        return Err(Error::Format {
            file,
            field: "image count",
            detail: format!("header declares {count} images of {rows}x{cols} but body holds {} bytes", body.len()),
        });
    }
    let images = body
        .chunks_exact(pixels.max(1))
        .take(count)
        .map(|img| img.iter().map(|&p| p as f64 / 255.0).collect())
        .collect();
    Ok((images, rows, cols))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let file = path.display().to_string();
    let bytes = read_maybe_gzip(path)?;
    let h = header(&bytes, 2, &file)?;
    if h[0] != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            file,
            field: "magic",
            detail: format!("expected {IDX_LABELS_MAGIC:#010x}, got {:#010x}", h[0]),
        });
    }
    let count = h[1] as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Format {
            file,
            field: "label count",
            detail: format!("header declares {count} labels but body holds {} bytes", body.len()),
        });
    }
    if let Some(bad) = body.iter().find(|&&l| l as usize >= MNIST_CLASSES) {
        return Err(Error::Format {
            file,
            field: "label value",
            detail: format!("label {bad} is not a digit"),
        });
    }
    Ok(body.to_vec())
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

/// Loads an IDX image/label pair (plain or gzip) into a one-hot dataset.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<LabeledDataset> {
    let (images, _, _) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.len() != labels.len() {
        return Err(Error::Format {
            file: labels_path.display().to_string(),
            field: "label count",
            detail: format!("{} labels for {} images", labels.len(), images.len()),
        });
    }
    let targets = labels.iter().map(|&l| one_hot(l as usize, MNIST_CLASSES)).collect();
    LabeledDataset::new(images, targets, split)
}

/// Standard file names inside an MNIST directory.
pub fn mnist_paths(dir: &Path, split: Split) -> (std::path::PathBuf, std::path::PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let pick = |stem: String| {
        let gz = dir.join(format!("{stem}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(stem)
        }
    };
    (
        pick(format!("{prefix}-images-idx3-ubyte")),
        pick(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Row `j` holds the fraction of target pixel `j` covered by each source pixel.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<f64>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|j| {
            let (lo, hi) = (j as f64 * scale, (j + 1) as f64 * scale);
            (0..src)
                .map(|i| {
                    let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                    overlap / scale
                })
                .collect()
        })
        .collect()
}

/// Area-weighted average pooling of a square `src_side` image to `dst_side`.
pub fn downsample(img: &[f64], src_side: usize, dst_side: usize) -> Result<Vec<f64>> {
    if img.len() != src_side * src_side {
        return Err(Error::shape("image", src_side * src_side, img.len()));
    }
    if dst_side == 0 || dst_side > src_side {
        return Err(Error::InvalidArgument(format!("cannot pool {src_side} to {dst_side}")));
    }
    let w = area_weights(src_side, dst_side);
    // Rows first, then columns.
    let mut rows = vec![0.0; dst_side * src_side];
    for (r, wr) in w.iter().enumerate() {
        for (i, &a) in wr.iter().enumerate().filter(|(_, &a)| a > 0.0) {
            for k in 0..src_side {
                rows[r * src_side + k] += a * img[i * src_side + k];
            }
        }
    }
    let mut out = vec![0.0; dst_side * dst_side];
    for r in 0..dst_side {
        for (c, wc) in w.iter().enumerate() {
            out[r * dst_side + c] = wc.iter().zip(&rows[r * src_side..(r + 1) * src_side]).map(|(a, v)| a * v).sum();
        }
    }
    Ok(out)
}

pub fn downsample_15(img: &[f64]) -> Result<Vec<f64>> {
    downsample(img, MNIST_SIDE, SMALL_SIDE)
}

/// Adds independent `N(0, sigma^2)` noise to every input component.
pub fn add_input_noise<R: Rng + ?Sized>(ds: &LabeledDataset, sigma: f64, rng: &mut R) -> Result<LabeledDataset> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be non-negative, got {sigma}")));
    }
    let mut out = ds.clone();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for x in out.inputs.iter_mut().flatten() {
            *x += normal.sample(rng);
        }
    }
    Ok(out)
}

/// `n` pairs uniform in `[0, 0.5]` with target `x1 + x2`.
pub fn make_addition_dataset<R: Rng + ?Sized>(n: usize, split: Split, rng: &mut R) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("addition dataset needs at least one sample".into()));
    }
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.random_range(0.0..=0.5);
        let b: f64 = rng.random_range(0.0..=0.5);
        inputs.push(vec![a, b]);
        targets.push(vec![a + b]);
    }
    LabeledDataset::new(inputs, targets, split)
}

/// One seeded shuffle, then contiguous chunks; the last short chunk is kept.
pub fn batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
