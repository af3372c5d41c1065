//! Datasets (MNIST IDX files, synthetic Gaussian blobs) and their
//! partitioning across workers.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{FslError, Result};
use crate::nn::{gather_rows, image_side, Batch};
use crate::seed::{self, Purpose};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CACHE_MAGIC: &[u8; 4] = b"FSLB";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("unexpected magic 0x{found:08x} (expected 0x{expected:08x})")]
    UnexpectedMagic { expected: u32, found: u32 },
    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(FslError::Input(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(FslError::Input("dataset is empty".into()));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(FslError::Input(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(FslError::Input("non-finite feature value".into()));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn image_side(&self) -> Option<usize> {
        image_side(self.dim())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: gather_rows(&self.features, indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn to_batch(&self) -> Batch {
        Batch {
            inputs: self.features.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Keep the first `n` examples of a seeded permutation.
    pub fn subsample(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seed::stream(seed, Purpose::Subsample, 0, 0));
        idx.truncate(n);
        idx.sort_unstable();
        self.subset(&idx)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| FslError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| FslError::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> std::result::Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            needed: at + 4,
            found: bytes.len(),
        })
}

/// Parse an IDX image file (`0x00000803`, count × rows × cols unsigned
/// bytes). Pixels are scaled to `[0, 1]` by `/255`.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<Array2<f64>, IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IdxError::UnexpectedMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let dim = rows * cols;
    let needed = 16 + count * dim;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    let pixels = bytes[16..needed].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Array2::from_shape_vec((count, dim), pixels).expect("size checked"))
}

pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<usize>, IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IdxError::UnexpectedMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..needed].iter().map(|&b| b as usize).collect())
}

fn idx_err(path: &Path, e: IdxError) -> FslError {
    FslError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Load an IDX image/label file pair (optionally gzip-compressed). The class
/// count is one more than the largest label seen, but never below 10.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = parse_idx_images(&read_maybe_gz(ip)?).map_err(|e| idx_err(ip, e))?;
    let labels = parse_idx_labels(&read_maybe_gz(lp)?).map_err(|e| idx_err(lp, e))?;
    if images.nrows() != labels.len() {
        return Err(idx_err(
            ip,
            IdxError::CountMismatch {
                images: images.nrows(),
                labels: labels.len(),
            },
        ));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(images, labels, num_classes)
}

/// Fixed class centres in `[0.2, 0.8]^dim`; identical for every seed so that
/// train and test draws share a distribution.
fn blob_centers(num_classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = seed::stream(0x5EED_B10B, Purpose::SynthTrain, num_classes as u64, dim as u64);
    (0..num_classes)
        .map(|_| (0..dim).map(|_| rng.random_range(0.2..0.8)).collect())
        .collect()
}

/// Isotropic Gaussian blobs, `per_class` examples per class, labels
/// interleaved (`i % num_classes`). Features are clamped to `[0, 1]`.
pub fn synth_blobs(num_classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return Err(FslError::Input("synth_blobs counts must be ≥ 1".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(FslError::Input(format!("invalid spread {spread}")));
    }
    let centers = blob_centers(num_classes, dim);
    let n = num_classes * per_class;
    let mut rng = seed::stream(seed, Purpose::SynthTrain, 0, 0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        for (j, &mu) in centers[c].iter().enumerate() {
            let v = if spread == 0.0 {
                mu
            } else {
                mu + spread * normal.sample(&mut rng)
            };
            features[[i, j]] = v.clamp(0.0, 1.0);
        }
        labels.push(c);
    }
    Dataset::new(features, labels, num_classes)
}

/// Write the little-endian binary cache: `FSLB`, u32 n, d, classes, then
/// `n·d` f64 features and `n` u16 labels.
pub fn write_cache(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(16 + data.features.len() * 8 + data.len() * 2);
    buf.extend_from_slice(CACHE_MAGIC);
    for v in [data.len(), data.dim(), data.num_classes] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in data.features.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &data.labels {
        buf.extend_from_slice(&(y as u16).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| FslError::io(path, e))?;
    f.write_all(&buf).map_err(|e| FslError::io(path, e))
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FslError::io(path, e))?;
    let bad = |message: String| FslError::Parse {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 16 || &bytes[..4] != CACHE_MAGIC {
        return Err(bad("not an FSLB cache".into()));
    }
    let u = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (n, d, classes) = (u(4), u(8), u(12));
    let needed = 16 + n * d * 8 + n * 2;
    if bytes.len() != needed {
        return Err(bad(format!("expected {needed} bytes, found {}", bytes.len())));
    }
    let feats = bytes[16..16 + n * d * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = bytes[16 + n * d * 8..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect();
    let features = Array2::from_shape_vec((n, d), feats).expect("size checked");
    Dataset::new(features, labels, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Regime {
    Iid,
    Dirichlet { alpha: f64 },
}

/// Disjoint per-worker index lists into a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub seed: u64,
    pub regime: Regime,
}

impl PartitionPlan {
    pub fn num_workers(&self) -> usize {
        self.assignments.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }
}

pub fn partition(data: &Dataset, workers: usize, regime: Regime, seed: u64) -> Result<PartitionPlan> {
    match regime {
        Regime::Iid => partition_iid(data, workers, seed),
        Regime::Dirichlet { alpha } => partition_dirichlet(data, workers, alpha, seed),
    }
}

/// Seeded shuffle split into `workers` parts whose sizes differ by at most 1.
pub fn partition_iid(data: &Dataset, workers: usize, seed: u64) -> Result<PartitionPlan> {
    if workers == 0 || workers > data.len() {
        return Err(FslError::Input(format!(
            "cannot split {} examples across {workers} workers",
            data.len()
        )));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut seed::stream(seed, Purpose::Partition, 0, 0));
    let base = data.len() / workers;
    let extra = data.len() % workers;
    let mut assignments = Vec::with_capacity(workers);
    let mut start = 0;
    for k in 0..workers {
        let len = base + usize::from(k < extra);
        assignments.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(PartitionPlan {
        assignments,
        seed,
        regime: Regime::Iid,
    })
}

/// Integer counts summing to `total`, proportional to `shares` (which sum to
/// 1), by largest remainder. Ties go to the lower index.
pub fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = shares.iter().map(|&q| (q * total as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    let frac = |k: usize| shares[k] * total as f64 - counts[k] as f64;
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn dirichlet_sample<R: Rng>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter().map(|g| g / sum).collect()
    } else {
        // every draw underflowed (tiny alpha): all mass on one worker
        let mut q = vec![0.0; k];
        q[rng.random_range(0..k)] = 1.0;
        q
    }
}

/// Per class, draw `q ~ Dir(α·1_K)` from that class's own stream and deal the
/// shuffled class examples by largest-remainder counts. Workers left empty
/// then take one example from the currently largest worker.
pub fn partition_dirichlet(data: &Dataset, workers: usize, alpha: f64, seed: u64) -> Result<PartitionPlan> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(FslError::Input(format!("Dirichlet alpha must be > 0, got {alpha}")));
    }
    if workers == 0 || workers > data.len() {
        return Err(FslError::Input(format!(
            "cannot split {} examples across {workers} workers",
            data.len()
        )));
    }
    let mut by_class = vec![Vec::new(); data.num_classes];
    for (i, &y) in data.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut assignments = vec![Vec::new(); workers];
    for (c, mut members) in by_class.into_iter().enumerate() {
        let mut rng = seed::stream(seed, Purpose::Partition, 1, c as u64);
        let q = dirichlet_sample(alpha, workers, &mut rng);
        members.shuffle(&mut rng);
        let counts = largest_remainder(&q, members.len());
        let mut start = 0;
        for (k, &n) in counts.iter().enumerate() {
            assignments[k].extend_from_slice(&members[start..start + n]);
            start += n;
        }
    }
    for k in 0..workers {
        if assignments[k].is_empty() {
            let donor = (0..workers)
                .max_by(|&a, &b| assignments[a].len().cmp(&assignments[b].len()).then(b.cmp(&a)))
                .expect("workers ≥ 1");
            let stolen = assignments[donor].pop().expect("donor is non-empty");
            assignments[k].push(stolen);
        }
    }
    Ok(PartitionPlan {
        assignments,
        seed,
        regime: Regime::Dirichlet { alpha },
    })
}

/// Paths of a standard MNIST directory, accepting both raw and `.gz` names.
pub fn mnist_paths(dir: &Path, train: bool) -> (PathBuf, PathBuf) {
    let stem = if train { "train" } else { "t10k" };
    let pick = |kind: &str| {
        let raw = dir.join(format!("{stem}-{kind}"));
        if raw.exists() {
            raw
        } else {
            dir.join(format!("{stem}-{kind}.gz"))
        }
    };
    (pick("images-idx3-ubyte"), pick("labels-idx1-ubyte"))
}
