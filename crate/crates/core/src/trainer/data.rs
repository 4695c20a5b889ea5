//! Datasets: CIFAR binary files, a synthetic stand-in, normalization.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkernel::Tensor;

pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_SIDE: usize = 32;
/// One label byte followed by three 32x32 planes.
pub const CIFAR_RECORD_LEN: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split, num_classes: usize) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::InvalidConfig(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidConfig(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Dataset {
            images,
            labels,
            split,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-class counts.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Subset with the given sample indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            num_classes: self.num_classes,
        }
    }
}

/// Decode CIFAR-10 binary records.
pub fn decode_cifar_binary(bytes: &[u8], split: Split, num_classes: usize) -> Result<Dataset> {
    let whole = bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN;
    if whole != bytes.len() {
        return Err(Error::Format {
            what: "CIFAR binary",
            offset: whole as u64,
            reason: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD_LEN} bytes",
                bytes.len() - whole
            ),
        });
    }
    let count = bytes.len() / CIFAR_RECORD_LEN;
    let pixels = CIFAR_RECORD_LEN - 1;
    let mut data = Vec::with_capacity(count * pixels);
    let mut labels = Vec::with_capacity(count);
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let label = record[0] as usize;
        if label >= num_classes {
            return Err(Error::Format {
                what: "CIFAR binary",
                offset: (r * CIFAR_RECORD_LEN) as u64,
                reason: format!("label {label} >= num_classes {num_classes}"),
            });
        }
        labels.push(label);
        data.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    let images = Tensor::from_vec([count, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE], data)?;
    Dataset::new(images, labels, split, num_classes)
}

/// Read a CIFAR-10 binary batch file (10 classes).
pub fn load_cifar_binary(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    decode_cifar_binary(&fs::read(path)?, split, 10)
}

/// Concatenate several files of the same split (e.g. the five training batches).
pub fn load_cifar_files<P: AsRef<Path>>(paths: &[P], split: Split) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        bytes.extend(fs::read(p)?);
    }
    decode_cifar_binary(&bytes, split, 10)
}

/// Blob color of class `k` out of `classes`: evenly spaced hues at full
/// saturation, so any two classes differ in mean color.
pub fn class_color(k: usize, classes: usize) -> [f64; 3] {
    let hue = k as f64 / classes as f64 * 6.0;
    let x = 1.0 - ((hue % 2.0) - 1.0).abs();
    match hue as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

pub const SYNTHETIC_BACKGROUND: f64 = 0.5;
const SYNTHETIC_NOISE: f64 = 0.05;
const SYNTHETIC_BLOB_SIGMA: f64 = 4.0;

/// `classes * per_class` 32x32 images: a gray noisy background with a
/// Gaussian blob of the class color at a random position. Labels cycle
/// `0, 1, .., classes - 1`.
pub fn make_synthetic(classes: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidConfig(format!("synthetic data needs at least 2 classes, got {classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, SYNTHETIC_NOISE).expect("valid std");
    let count = classes * per_class;
    let side = CIFAR_SIDE;
    let plane = side * side;
    let mut data = vec![0.0; count * CIFAR_CHANNELS * plane];
    let labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
    for (i, img) in data.chunks_exact_mut(CIFAR_CHANNELS * plane).enumerate() {
        let color = class_color(labels[i], classes);
        let cy = rng.random_range(8.0..24.0);
        let cx = rng.random_range(8.0..24.0);
        for y in 0..side {
            for x in 0..side {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let g = (-d2 / (2.0 * SYNTHETIC_BLOB_SIGMA * SYNTHETIC_BLOB_SIGMA)).exp();
                for c in 0..CIFAR_CHANNELS {
                    let v = SYNTHETIC_BACKGROUND * (1.0 - g) + color[c] * g + noise.sample(&mut rng);
                    img[c * plane + y * side + x] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    let images = Tensor::from_vec([count, CIFAR_CHANNELS, side, side], data)?;
    Dataset::new(images, labels, Split::Train, classes)
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Population statistics over every pixel of every image.
    pub fn compute(images: &Tensor) -> Result<Self> {
        let [n, c, h, w] = images.dims();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let count = (n * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for b in 0..n {
            for (ch, plane) in images.sample(b).chunks_exact(h * w).enumerate() {
                mean[ch] += plane.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for b in 0..n {
            for (ch, plane) in images.sample(b).chunks_exact(h * w).enumerate() {
                std[ch] += plane.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        std.iter_mut().for_each(|s| *s = (*s / count).sqrt());
        Ok(ChannelStats { mean, std })
    }

    /// Statistics of a training split; refuses other splits.
    pub fn from_train(dataset: &Dataset) -> Result<Self> {
        if dataset.split != Split::Train {
            return Err(Error::InvalidConfig("normalization statistics must come from the train split".into()));
        }
        ChannelStats::compute(&dataset.images)
    }
}

/// `(x - mean_c) / std_c` per channel.
pub fn normalize(dataset: &Dataset, stats: &ChannelStats) -> Result<Dataset> {
    let [_, c, h, w] = dataset.images.dims();
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::InvalidConfig(format!(
            "statistics for {} channels, images have {c}",
            stats.mean.len()
        )));
    }
    // A constant channel's std comes out as rounding noise, not exactly zero.
    let degenerate = |(&s, &m): (&f64, &f64)| s.is_nan() || s <= 1e-12 * (1.0 + m.abs());
    if let Some(ch) = stats.std.iter().zip(&stats.mean).position(degenerate) {
        return Err(Error::InvalidConfig(format!("channel {ch} has zero standard deviation")));
    }
    let mut out = dataset.clone();
    for b in 0..out.len() {
        for (ch, plane) in out.images.sample_mut(b).chunks_exact_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v = (*v - stats.mean[ch]) / stats.std[ch]);
        }
    }
    Ok(out)
}
