//! Labeled datasets: MNIST IDX ingestion and synthetic generators.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: String,
    sample_shape: Vec<usize>,
    classes: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: impl Into<String>,
        sample_shape: Vec<usize>,
        classes: usize,
        inputs: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let d: usize = sample_shape.iter().product();
        if d == 0 || sample_shape.is_empty() {
            return Err(Error::invalid(format!("invalid sample shape {sample_shape:?}")));
        }
        if inputs.len() != d * labels.len() {
            return Err(Error::invalid(format!(
                "{} input values for {} labels of shape {sample_shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(v) = inputs.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("input value {v} outside [0, 1]")));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!("label {y} outside [0, {classes})")));
        }
        Ok(Self {
            name: name.into(),
            split: split.into(),
            sample_shape,
            classes,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.sample_len();
        &self.inputs[i * d..(i + 1) * d]
    }

    /// Batch tensor `[n, sample_shape...]` and labels for the given indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        let x = Tensor::new(shape, data).expect("batch shape matches data");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` examples (all of them when `n >= len`).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            inputs: self.inputs[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let (x, labels) = self.batch(indices);
        Self {
            inputs: x.into_data(),
            labels,
            ..self.clone()
        }
    }
}

fn read_be_u32(buf: &[u8], at: usize) -> Option<u32> {
    buf.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
}

struct Idx {
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn read_idx(path: &Path, magic: u32, rank: usize) -> Result<Idx> {
    let buf = fs::read(path)?;
    let header = 4 + 4 * rank;
    let truncated = |found: usize| Error::IdxTruncated {
        path: path.to_path_buf(),
        expected: header,
        found,
    };
    let found = read_be_u32(&buf, 0).ok_or_else(|| truncated(buf.len()))?;
    if found != magic {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| read_be_u32(&buf, 4 + 4 * i).map(|v| v as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| truncated(buf.len()))?;
    let expected = header + dims.iter().product::<usize>();
    if buf.len() != expected {
        return Err(Error::IdxTruncated {
            path: path.to_path_buf(),
            expected,
            found: buf.len(),
        });
    }
    Ok(Idx {
        dims,
        payload: buf[header..].to_vec(),
    })
}

/// Parses an IDX image/label pair; pixels are scaled by 1/255 into [0, 1].
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let images = read_idx(images_path, IDX_IMAGES_MAGIC, 3)?;
    let labels = read_idx(labels_path.as_ref(), IDX_LABELS_MAGIC, 1)?;
    if images.dims[0] != labels.dims[0] {
        return Err(Error::IdxCountMismatch {
            images: images.dims[0],
            labels: labels.dims[0],
        });
    }
    let split = images_path
        .file_name()
        .map(|f| f.to_string_lossy().split('-').next().unwrap_or("").to_string())
        .unwrap_or_default();
    Dataset::new(
        "mnist",
        split,
        vec![1, images.dims[1], images.dims[2]],
        10,
        images.payload.iter().map(|&p| f64::from(p) / 255.0).collect(),
        labels.payload.iter().map(|&l| usize::from(l)).collect(),
    )
}

/// Standard MNIST file names inside `dir`.
pub fn load_mnist_dir(dir: impl AsRef<Path>, train: bool) -> Result<Dataset> {
    let dir = dir.as_ref();
    let prefix = if train { "train" } else { "t10k" };
    load_mnist_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// MNIST directory from `ADVREG_MNIST_DIR`, else `data/mnist` under `root`.
pub fn mnist_dir(root: impl AsRef<Path>) -> PathBuf {
    std::env::var_os("ADVREG_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| root.as_ref().join("data").join("mnist"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthKind {
    /// Two isotropic unit-variance clusters at ±μ, `separation = 2‖μ‖` in σ
    /// units along the first diagonal.
    GaussianPair { separation: f64 },
    /// Inner disc (label 0) and surrounding annulus (label 1) in the first two
    /// coordinates; remaining coordinates are noise.
    Ring,
}

/// Deterministic synthetic two-class data, rescaled affinely into [0, 1]^d.
pub fn synth_dataset(kind: SynthKind, n: usize, d: usize, seed: u64) -> Result<Dataset> {
    if n < 2 || d == 0 {
        return Err(Error::invalid(format!("synthetic data needs n ≥ 2 and d ≥ 1, got n={n}, d={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = Vec::with_capacity(n * d);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    for &y in &labels {
        let mut g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        match kind {
            SynthKind::GaussianPair { separation } => {
                let shift = separation / 2.0 / (d as f64).sqrt();
                let sign = if y == 1 { 1.0 } else { -1.0 };
                g.iter_mut().for_each(|v| *v += sign * shift);
            }
            SynthKind::Ring => {
                let angle = g[0].atan2(*g.get(1).unwrap_or(&1.0));
                let radius = if y == 0 { 1.0 } else { 3.0 } + 0.25 * g[0];
                g[0] = radius * angle.cos();
                if d > 1 {
                    g[1] = radius * angle.sin();
                }
                g.iter_mut().skip(2).for_each(|v| *v *= 0.1);
            }
        }
        raw.extend(g);
    }
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let inputs = raw.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect();
    let name = match kind {
        SynthKind::GaussianPair { .. } => "gaussian_pair",
        SynthKind::Ring => "ring",
    };
    Dataset::new(name, "synthetic", vec![d], 2, inputs, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(payload);
        out
    }

    fn write_pair(dir: &Path, images: &[u8], labels: &[u8]) -> (PathBuf, PathBuf) {
        let ip = dir.join("t10k-images-idx3-ubyte");
        let lp = dir.join("t10k-labels-idx1-ubyte");
        fs::write(&ip, images).unwrap();
        fs::write(&lp, labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn magic_bytes_are_public_constants() {
        assert_eq!(IDX_IMAGES_MAGIC.to_be_bytes(), [0, 0, 8, 3]);
        assert_eq!(IDX_IMAGES_MAGIC, 2051);
        assert_eq!(IDX_LABELS_MAGIC, 2049);
    }

    #[test]
    fn parses_and_scales_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(
            dir.path(),
            &idx_bytes(2051, &[2, 2, 2], &[0, 255, 51, 102, 255, 255, 0, 0]),
            &idx_bytes(2049, &[2], &[3, 9]),
        );
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sample_shape(), &[1, 2, 2]);
        assert_eq!(ds.sample(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.labels(), &[3, 9]);
        assert_eq!(ds.split, "t10k");
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let good_labels = idx_bytes(2049, &[2], &[1, 2]);
        let (ip, lp) = write_pair(dir.path(), &idx_bytes(2049, &[2, 1, 1], &[0, 0]), &good_labels);
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::IdxMagic { found: 2049, .. })));
        let (ip, lp) = write_pair(dir.path(), &idx_bytes(2051, &[2, 1, 1], &[0]), &good_labels);
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::IdxTruncated { .. })));
        let (ip, lp) = write_pair(dir.path(), &idx_bytes(2051, &[2, 1, 1], &[0, 0, 7]), &good_labels);
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::IdxTruncated { .. })));
        let (ip, lp) = write_pair(dir.path(), &idx_bytes(2051, &[3, 1, 1], &[0, 0, 0]), &good_labels);
        assert!(matches!(
            load_mnist_idx(&ip, &lp),
            Err(Error::IdxCountMismatch { images: 3, labels: 2 })
        ));
        let (ip, lp) = write_pair(dir.path(), &[0, 0], &good_labels);
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::IdxTruncated { .. })));
    }

    #[test]
    fn synthetic_is_reproducible_and_balanced() {
        let kind = SynthKind::GaussianPair { separation: 10.0 };
        let a = synth_dataset(kind, 101, 5, 3).unwrap();
        let b = synth_dataset(kind, 101, 5, 3).unwrap();
        assert_eq!(a, b);
        let ones = a.labels().iter().filter(|&&y| y == 1).count();
        assert!((ones as i64 - (a.len() - ones) as i64).abs() <= 1);
        assert!(a.inputs().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(synth_dataset(SynthKind::Ring, 1, 2, 0).is_err());
        assert!(synth_dataset(SynthKind::Ring, 10, 0, 0).is_err());
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(Dataset::new("x", "t", vec![1], 2, vec![1.5], vec![0]).is_err());
        assert!(Dataset::new("x", "t", vec![1], 2, vec![0.5], vec![2]).is_err());
        assert!(Dataset::new("x", "t", vec![2], 2, vec![0.5], vec![0]).is_err());
    }
}
