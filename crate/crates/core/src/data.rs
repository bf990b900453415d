//! Labelled datasets: synthetic Gaussian blobs and CIFAR-style binary files.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[samples, ...feature shape]`.
    pub x: Tensor,
    pub y: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, num_classes: usize) -> Result<Self> {
        if x.shape().first().copied().unwrap_or(0) != y.len() {
            return Err(Error::Dataset(format!(
                "{} labels for features of shape {:?}",
                y.len(),
                x.shape()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Dataset(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self { x, y, num_classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &c in &self.y {
            counts[c] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobsConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Standard deviation of every component.
    pub spread: f64,
    /// Norm of the component means.
    pub radius: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            dim: 32,
            samples_per_class: 500,
            spread: 1.0,
            radius: 5.0,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Each class is an equal mixture of two isotropic Gaussians whose means lie
/// on the sphere of radius `cfg.radius`.
pub fn generate_blobs(cfg: &BlobsConfig) -> Result<DatasetSplit> {
    if cfg.num_classes < 2 {
        return Err(Error::Dataset("at least two classes are required".into()));
    }
    if cfg.dim == 0 || !(0.0..1.0).contains(&cfg.val_fraction) || cfg.spread < 0.0 {
        return Err(Error::Dataset(format!("invalid blobs configuration {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut means = Vec::with_capacity(2 * cfg.num_classes);
    for _ in 0..2 * cfg.num_classes {
        let v: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        means.push(v.into_iter().map(|x| x * cfg.radius / norm).collect::<Vec<f64>>());
    }

    let (mut train_idx, mut val_idx) = (Vec::new(), Vec::new());
    let mut data = Vec::with_capacity(cfg.num_classes * cfg.samples_per_class * cfg.dim);
    let mut labels = Vec::new();
    let n_val = (cfg.samples_per_class as f64 * cfg.val_fraction).round() as usize;
    for class in 0..cfg.num_classes {
        let mut order: Vec<usize> = (0..cfg.samples_per_class).collect();
        order.shuffle(&mut rng);
        for (i, &slot) in order.iter().enumerate() {
            let mean = &means[2 * class + i % 2];
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(m + cfg.spread * z);
            }
            let idx = labels.len();
            labels.push(class);
            if slot < n_val {
                val_idx.push(idx);
            } else {
                train_idx.push(idx);
            }
        }
    }
    let all = Dataset::new(
        Tensor::new(vec![labels.len(), cfg.dim], data)?,
        labels,
        cfg.num_classes,
    )?;
    Ok(DatasetSplit {
        train: all.subset(&train_idx),
        val: all.subset(&val_idx),
    })
}

/// Reads records of one label byte followed by `c*h*w` pixel bytes, with
/// pixels scaled to `[0, 1]`.
pub fn load_binary_images(path: &Path, c: usize, h: usize, w: usize, num_classes: usize) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_binary_images(&bytes, c, h, w, num_classes)
}

pub fn parse_binary_images(bytes: &[u8], c: usize, h: usize, w: usize, num_classes: usize) -> Result<Dataset> {
    let pixels = c * h * w;
    let record = 1 + pixels;
    if !bytes.len().is_multiple_of(record) {
        return Err(Error::Dataset(format!(
            "truncated file: {} bytes is not a multiple of the {record}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    if n == 0 {
        log::warn!("binary image file holds no records");
    }
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * pixels);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[0] as usize;
        if label >= num_classes {
            return Err(Error::Dataset(format!(
                "record {i} has label {label}, expected < {num_classes}"
            )));
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&p| f64::from(p) / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, num_classes)
}

/// Per-channel mean and standard deviation of `[n, c, ...]` features.
pub fn channel_stats(d: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let shape = d.x.shape();
    let c = shape.get(1).copied().unwrap_or(0);
    let inner: usize = shape.iter().skip(2).product();
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for row in d.x.data().chunks(c * inner.max(1)) {
        for (ch, plane) in row.chunks(inner.max(1)).enumerate() {
            for &v in plane {
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
    }
    let count = (d.len() * inner).max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-12))
        .collect();
    (mean, std)
}

pub fn standardize(d: &mut Dataset, mean: &[f64], std: &[f64]) {
    let c = mean.len();
    if c == 0 || d.is_empty() {
        return;
    }
    let inner = d.x.row_len() / c;
    for row in d.x.data_mut().chunks_mut(c * inner) {
        for (ch, plane) in row.chunks_mut(inner).enumerate() {
            for v in plane {
                *v = (*v - mean[ch]) / std[ch];
            }
        }
    }
}

/// Seeded split into train and validation parts, with per-channel
/// standardization using statistics of the train part.
pub fn split_and_standardize(d: &Dataset, val_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Dataset(format!("validation fraction {val_fraction} outside [0, 1)")));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (d.len() as f64 * val_fraction).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train = d.subset(train_idx);
    let mut val = d.subset(val_idx);
    let (mean, std) = channel_stats(&train);
    standardize(&mut train, &mean, &std);
    standardize(&mut val, &mean, &std);
    Ok(DatasetSplit { train, val })
}
