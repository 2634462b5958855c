//! Classification datasets.
//!
//! The built-in task is a seeded synthetic one: oriented sinusoidal gratings
//! under additive Gaussian noise, one orientation per class. It is generated
//! on the fly, needs no downloads, and a ~20k-parameter residual net learns
//! it well, which makes accuracy differences under injected faults easy to
//! resolve. CIFAR-10 in its standard binary layout can be loaded from disk
//! for full-scale runs.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Flat [n, C, H, W] values.
    images: Vec<f64>,
    labels: Vec<usize>,
    pub shape: [usize; 3],
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn sample_stride(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    /// Gather the given sample indices into a batch tensor and label vector.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let stride = self.sample_stride();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let t = Tensor::from_vec(
            &[indices.len(), self.shape[0], self.shape[1], self.shape[2]],
            data,
        )
        .expect("consistent stride");
        (t, labels)
    }

    /// Sequential batches covering the whole set (last one may be short).
    pub fn batch_ranges(&self, batch_size: usize) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.len() {
            let end = (start + batch_size).min(self.len());
            out.push(start..end);
            start = end;
        }
        out
    }

    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.sample_stride()].to_vec(),
            labels: self.labels[..n].to_vec(),
            shape: self.shape,
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub image: usize,
    pub channels: usize,
    pub train: usize,
    pub test: usize,
    /// Additive Gaussian noise level.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 10,
            image: 12,
            channels: 1,
            train: 1536,
            test: 512,
            noise: 0.85,
            seed: 1,
        }
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; u1 in (0, 1]
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// One grating image for class `k`: orientation k*pi/classes with small
/// jitter, random spatial frequency and phase, plus noise.
fn grating(cfg: &SyntheticConfig, split: u64, index: usize) -> (Vec<f64>, usize) {
    let label = index % cfg.classes;
    let mut rng = rng::stream(cfg.seed, &[0x6461_7461, split, index as u64]);
    let jitter: f64 = rng.random_range(-0.12..0.12);
    let theta = std::f64::consts::PI * (label as f64 + jitter) / cfg.classes as f64;
    let freq: f64 = rng.random_range(1.3..2.1);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let omega = std::f64::consts::TAU * freq / cfg.image as f64;
    let (dir_y, dir_x) = theta.sin_cos();

    let mut pixels = Vec::with_capacity(cfg.channels * cfg.image * cfg.image);
    for _ in 0..cfg.channels {
        for y in 0..cfg.image {
            for x in 0..cfg.image {
                let t = omega * (x as f64 * dir_x + y as f64 * dir_y) + phase;
                pixels.push(t.sin() + cfg.noise * gaussian(&mut rng));
            }
        }
    }
    (pixels, label)
}

fn synthetic_split(cfg: &SyntheticConfig, split: u64, count: usize) -> Dataset {
    let mut images = Vec::with_capacity(count * cfg.channels * cfg.image * cfg.image);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let (px, label) = grating(cfg, split, i);
        images.extend_from_slice(&px);
        labels.push(label);
    }
    Dataset {
        images,
        labels,
        shape: [cfg.channels, cfg.image, cfg.image],
        classes: cfg.classes,
    }
}

/// Deterministic (train, test) split of the synthetic grating task.
pub fn synthetic_pair(cfg: &SyntheticConfig) -> (Dataset, Dataset) {
    (
        synthetic_split(cfg, 0, cfg.train),
        synthetic_split(cfg, 1, cfg.test),
    )
}

const CIFAR_CLASSES: usize = 10;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

fn load_cifar_file(path: &Path, images: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::InvalidConfig(format!(
            "{} is not a CIFAR-10 binary batch (size {})",
            path.display(),
            bytes.len()
        )));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        // stored channel-major already: 1024 R, 1024 G, 1024 B
        images.extend(rec[1..].iter().map(|&b| b as f64 / 127.5 - 1.0));
    }
    Ok(())
}

/// Load CIFAR-10 from a directory holding the standard `data_batch_*.bin` /
/// `test_batch.bin` files. Pixels are scaled to [-1, 1].
pub fn cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        load_cifar_file(
            &dir.join(format!("data_batch_{i}.bin")),
            &mut train_images,
            &mut train_labels,
        )?;
    }
    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    load_cifar_file(&dir.join("test_batch.bin"), &mut test_images, &mut test_labels)?;
    let mk = |images, labels| Dataset {
        images,
        labels,
        shape: [3, 32, 32],
        classes: CIFAR_CLASSES,
    };
    Ok((
        mk(train_images, train_labels),
        mk(test_images, test_labels),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_deterministic_and_disjoint_streams() {
        let cfg = SyntheticConfig {
            train: 32,
            test: 32,
            ..Default::default()
        };
        let (tr1, te1) = synthetic_pair(&cfg);
        let (tr2, _) = synthetic_pair(&cfg);
        assert_eq!(tr1.images, tr2.images);
        // same index, different split: different pixels
        assert_ne!(tr1.images[..144], te1.images[..144]);
    }

    #[test]
    fn labels_are_balanced() {
        let cfg = SyntheticConfig {
            classes: 4,
            train: 40,
            ..Default::default()
        };
        let (train, _) = synthetic_pair(&cfg);
        for k in 0..4 {
            assert_eq!(train.labels().iter().filter(|&&l| l == k).count(), 10);
        }
    }

    #[test]
    fn batches_cover_everything_once() {
        let cfg = SyntheticConfig {
            train: 10,
            ..Default::default()
        };
        let (train, _) = synthetic_pair(&cfg);
        let ranges = train.batch_ranges(4);
        assert_eq!(ranges, vec![0..4, 4..8, 8..10]);
        let (batch, labels) = train.batch(&[3, 7]);
        assert_eq!(batch.shape(), &[2, 1, 12, 12]);
        assert_eq!(labels, vec![train.labels()[3], train.labels()[7]]);
    }

    #[test]
    fn pixel_values_are_bounded_sane() {
        let cfg = SyntheticConfig::default();
        let (train, _) = synthetic_pair(&cfg);
        let (batch, _) = train.batch(&[0]);
        assert!(batch.data().iter().all(|v| v.is_finite() && v.abs() < 10.0));
    }
}
