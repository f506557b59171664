//! Labeled datasets: two builtin synthetic tasks and IDX image/label pairs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

pub const SYNTHETIC_RANK2: &str = "synthetic-rank2";
pub const TWO_GAUSSIANS: &str = "two-gaussians";

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One sample per row, flattened channel-major.
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// `[channels, height, width]` of one sample.
    pub shape: [usize; 3],
}

impl Dataset {
    pub fn new(features: DenseMatrix, labels: Vec<usize>, num_classes: usize, shape: [usize; 3]) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Format(format!(
                "{} samples but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if shape.iter().product::<usize>() != features.cols() {
            return Err(Error::Shape(format!("shape {shape:?} does not match {} features", features.cols())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidInput(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `indices` as a batch.
    pub fn gather(&self, indices: &[usize]) -> (DenseMatrix, Vec<usize>) {
        let d = self.features.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        let x = DenseMatrix::new(indices.len(), d, data).expect("gathered rows match width");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let indices: Vec<usize> = range.collect();
        let (features, labels) = self.gather(&indices);
        Self {
            features,
            labels,
            num_classes: self.num_classes,
            shape: self.shape,
        }
    }

    /// Leading `1 - eval_fraction` of the samples for training, the rest for evaluation.
    pub fn split(&self, eval_fraction: f64) -> Result<DataSplit> {
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(Error::Config(format!("eval fraction must be in [0, 1), got {eval_fraction}")));
        }
        let n_eval = (self.len() as f64 * eval_fraction).round() as usize;
        let n_train = self.len() - n_eval;
        if n_train == 0 {
            return Err(Error::NotEnoughData("no training samples after split".into()));
        }
        Ok(DataSplit {
            train: self.slice(0..n_train),
            eval: self.slice(n_train..self.len()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub eval: Dataset,
}

/// 4096 samples `x ~ N(0, I₆₄)` labeled by `argmax(A·B·x)` with a fixed
/// random `A: 10×2`, `B: 2×64`: a teacher of rank 2.
pub fn synthetic_rank2(seed: u64) -> Dataset {
    let (n, d, classes, rank) = (4096, 64, 10, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DenseMatrix::random_normal(classes, rank, 1.0, &mut rng);
    let b = DenseMatrix::random_normal(rank, d, 1.0, &mut rng);
    let teacher = a.matmul(&b).expect("teacher shapes");
    let x = DenseMatrix::random_normal(n, d, 1.0, &mut rng);
    let logits = x.matmul_t(&teacher).expect("teacher shapes");
    let labels = (0..n).map(|i| argmax(logits.row(i))).collect();
    Dataset::new(x, labels, classes, [d, 1, 1]).expect("consistent synthetic data")
}

/// Two unit-variance Gaussian blobs in 16 dimensions, centers `±1.5` apart
/// along the first axis; 2048 samples, alternating labels.
pub fn two_gaussians(seed: u64) -> Dataset {
    let (n, d) = (2048, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            let shift = if j == 0 { if y == 0 { -0.75 } else { 0.75 } } else { 0.0 };
            data.push(z + shift);
        }
        labels.push(y);
    }
    let x = DenseMatrix::new(n, d, data).expect("sized above");
    Dataset::new(x, labels, 2, [d, 1, 1]).expect("consistent synthetic data")
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parse IDX images (`0x803`, dims n×rows×cols, u8 pixels scaled to [0,1])
/// and labels (`0x801`, dim n).
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!("images: bad magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!("labels: bad magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let n_labels = be_u32(labels, 4, "labels")? as usize;
    if n != n_labels {
        return Err(Error::Format(format!("{n} images but {n_labels} labels")));
    }
    let pixels = &images[16..];
    let label_bytes = &labels[8..];
    if pixels.len() != n * rows * cols {
        return Err(Error::Format(format!(
            "images: expected {} pixel bytes, found {}",
            n * rows * cols,
            pixels.len()
        )));
    }
    if label_bytes.len() != n {
        return Err(Error::Format(format!("labels: expected {n} bytes, found {}", label_bytes.len())));
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let features = DenseMatrix::new(n, rows * cols, data)?;
    let labels: Vec<usize> = label_bytes.iter().map(|&y| usize::from(y)).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, num_classes, [1, rows, cols])
}

/// A builtin name, or `images.idx,labels.idx`.
pub fn load_dataset(source: &str, seed: u64) -> Result<Dataset> {
    match source {
        SYNTHETIC_RANK2 => Ok(synthetic_rank2(seed)),
        TWO_GAUSSIANS => Ok(two_gaussians(seed)),
        _ => {
            let (images, labels) = source.split_once(',').ok_or_else(|| {
                Error::Config(format!(
                    "unknown dataset '{source}': expected {SYNTHETIC_RANK2}, {TWO_GAUSSIANS} or IMAGES,LABELS"
                ))
            })?;
            let read = |p: &str| std::fs::read(Path::new(p)).map_err(|e| Error::io(p, e));
            parse_idx(&read(images)?, &read(labels)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES, n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = IDX_LABELS.to_be_bytes().to_vec();
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = synthetic_rank2(7);
        assert_eq!(a, synthetic_rank2(7));
        assert_ne!(a.labels, synthetic_rank2(8).labels);
        assert_eq!(a.len(), 4096);
        assert_eq!(a.features.cols(), 64);
    }

    #[test]
    fn idx_round_trip() {
        let ds = parse_idx(&idx_images(2, 1, 2, &[0, 255, 51, 102]), &idx_labels(&[1, 0])).unwrap();
        assert_eq!(ds.features.data(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.shape, [1, 1, 2]);
    }

    #[test]
    fn idx_errors() {
        let mut bad = idx_images(1, 1, 1, &[0]);
        bad[3] = 0x01;
        assert!(matches!(parse_idx(&bad, &idx_labels(&[0])), Err(Error::Format(_))));
        let r = parse_idx(&idx_images(2, 1, 1, &[0, 0]), &idx_labels(&[0]));
        assert!(matches!(r, Err(Error::Format(_))));
    }

    #[test]
    fn split_sizes() {
        let s = two_gaussians(1).split(0.125).unwrap();
        assert_eq!((s.train.len(), s.eval.len()), (1792, 256));
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }
}
