//! Desk-scale datasets and deterministic batching.
//!
//! Two sources: synthetic Gaussian-blob classification (the default task)
//! and IDX-format image files. Batching is always drop-last so every batch
//! has exactly `b` samples; the feature weighting head's input width depends
//! on it.

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{MmkdError, Result};

/// A labelled split. `ids` are stable per-sample identifiers within the
/// split (used by the hard buffer to recognize re-encountered samples).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub ids: Vec<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn one_hot(&self) -> Array2<f64> {
        one_hot(&self.labels, self.classes)
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), classes));
    for (i, &y) in labels.iter().enumerate() {
        assert!(y < classes, "label {y} out of range for {classes} classes");
        out[(i, y)] = 1.0;
    }
    out
}

/// Train/test pair plus the generator's ground truth (for oracle tests).
#[derive(Debug, Clone)]
pub struct BlobBundle {
    pub train: Dataset,
    pub test: Dataset,
    /// Class centers in the raw (un-normalized) space.
    pub centers: Array2<f64>,
    pub spread: f64,
    /// Per-feature mean/std computed on the train split and applied to both.
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
}

/// Default blob-task geometry: tuned so the Bayes-optimal classifier sits
/// near 85% accuracy.
pub const DEFAULT_BLOB_SPREAD: f64 = 4.0;

/// Gaussian-blob classification: class `c` draws from an isotropic Gaussian
/// of scale `spread` around a fixed random center. Stratified 80/20
/// train/test split; normalization statistics come from the train split
/// only. Deterministic in `seed`.
pub fn make_blobs(
    classes: usize,
    per_class: usize,
    n_in: usize,
    spread: f64,
    seed: u64,
) -> Result<BlobBundle> {
    if classes < 2 {
        return Err(MmkdError::config("need at least two classes"));
    }
    if per_class < 5 || n_in == 0 {
        return Err(MmkdError::config("per_class must be >= 5 and n_in >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();

    let centers = Array2::from_shape_fn((classes, n_in), |_| {
        2.0 * std_normal.sample(&mut rng)
    });

    let n_total = classes * per_class;
    let mut inputs = Array2::zeros((n_total, n_in));
    let mut labels = vec![0usize; n_total];
    for c in 0..classes {
        for s in 0..per_class {
            let row = c * per_class + s;
            labels[row] = c;
            for j in 0..n_in {
                inputs[(row, j)] = centers[(c, j)] + spread * std_normal.sample(&mut rng);
            }
        }
    }

    // Stratified split: last 20% of each class block goes to test.
    let test_per_class = per_class / 5;
    let train_per_class = per_class - test_per_class;
    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for c in 0..classes {
        for s in 0..per_class {
            let row = c * per_class + s;
            if s < train_per_class {
                train_rows.push(row);
            } else {
                test_rows.push(row);
            }
        }
    }

    let gather = |rows: &[usize]| -> (Array2<f64>, Vec<usize>) {
        let mut m = Array2::zeros((rows.len(), n_in));
        let mut l = Vec::with_capacity(rows.len());
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..n_in {
                m[(i, j)] = inputs[(r, j)];
            }
            l.push(labels[r]);
        }
        (m, l)
    };
    let (mut train_x, train_y) = gather(&train_rows);
    let (mut test_x, test_y) = gather(&test_rows);

    // Normalize with train statistics only.
    let n_train = train_x.nrows() as f64;
    let mut mean = vec![0.0; n_in];
    let mut std = vec![0.0; n_in];
    for j in 0..n_in {
        let m: f64 = train_x.column(j).sum() / n_train;
        let v: f64 = train_x.column(j).iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n_train;
        mean[j] = m;
        std[j] = v.sqrt().max(1e-12);
    }
    for x in [&mut train_x, &mut test_x] {
        for j in 0..n_in {
            for i in 0..x.nrows() {
                x[(i, j)] = (x[(i, j)] - mean[j]) / std[j];
            }
        }
    }

    let train = Dataset {
        ids: (0..train_x.nrows() as u64).collect(),
        inputs: train_x,
        labels: train_y,
        classes,
    };
    let test = Dataset {
        ids: (0..test_x.nrows() as u64).collect(),
        inputs: test_x,
        labels: test_y,
        classes,
    };
    Ok(BlobBundle {
        train,
        test,
        centers,
        spread,
        norm_mean: mean,
        norm_std: std,
    })
}

/// Monte-Carlo estimate of the Bayes-optimal accuracy of a blob task.
///
/// With equal priors and isotropic equal-variance Gaussians the Bayes rule
/// is nearest-center; sampling from the generator's own densities gives the
/// rate directly.
pub fn estimate_bayes_accuracy(
    centers: &Array2<f64>,
    spread: f64,
    samples: usize,
    seed: u64,
) -> f64 {
    let (classes, n_in) = centers.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut correct = 0usize;
    for i in 0..samples {
        let c = i % classes;
        let x: Vec<f64> = (0..n_in)
            .map(|j| centers[(c, j)] + spread * std_normal.sample(&mut rng))
            .collect();
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for k in 0..classes {
            let d: f64 = (0..n_in)
                .map(|j| (x[j] - centers[(k, j)]).powi(2))
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        if best == c {
            correct += 1;
        }
    }
    correct as f64 / samples as f64
}

// ---- batching -----------------------------------------------------------------

/// Batch emission plan; drop-last is mandatory.
#[derive(Debug, Clone, Copy)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
}

/// One training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels_onehot: Array2<f64>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

/// Deterministic drop-last batches: a fresh permutation per `(seed, epoch)`,
/// exactly `floor(N / b)` batches, remainder dropped.
pub fn batches(dataset: &Dataset, plan: &BatchPlan, epoch: usize) -> Result<Vec<Batch>> {
    let n = dataset.len();
    let b = plan.batch_size;
    if b == 0 || b > n {
        return Err(MmkdError::config(format!(
            "batch size {b} invalid for dataset of {n} samples"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }

    let n_in = dataset.input_dim();
    let classes = dataset.classes;
    let mut out = Vec::with_capacity(n / b);
    for chunk in perm.chunks_exact(b) {
        let mut inputs = Array2::zeros((b, n_in));
        let mut labels_onehot = Array2::zeros((b, classes));
        let mut labels = Vec::with_capacity(b);
        let mut ids = Vec::with_capacity(b);
        for (i, &r) in chunk.iter().enumerate() {
            for j in 0..n_in {
                inputs[(i, j)] = dataset.inputs[(r, j)];
            }
            labels_onehot[(i, dataset.labels[r])] = 1.0;
            labels.push(dataset.labels[r]);
            ids.push(dataset.ids[r]);
        }
        out.push(Batch {
            inputs,
            labels_onehot,
            labels,
            ids,
        });
    }
    Ok(out)
}

// ---- IDX binary format ----------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    if offset + 4 > bytes.len() {
        return Err(MmkdError::format(
            offset as u64,
            "truncated file: expected 4 more bytes",
        ));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parse an IDX image file: pixels scaled to `[0, 1]`, one row per image.
pub fn load_idx_images(path: &Path) -> Result<(Array2<f64>, usize, usize)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let magic = read_u32_be(&bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(MmkdError::format(
            0,
            format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = read_u32_be(&bytes, 4)? as usize;
    let rows = read_u32_be(&bytes, 8)? as usize;
    let cols = read_u32_be(&bytes, 12)? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(MmkdError::format(
            bytes.len() as u64,
            format!("truncated image data: need {need} bytes, have {}", bytes.len()),
        ));
    }
    let mut out = Array2::zeros((count, rows * cols));
    for i in 0..count {
        for p in 0..rows * cols {
            out[(i, p)] = bytes[16 + i * rows * cols + p] as f64 / 255.0;
        }
    }
    Ok((out, rows, cols))
}

/// Parse an IDX label file.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let magic = read_u32_be(&bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(MmkdError::format(
            0,
            format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let count = read_u32_be(&bytes, 4)? as usize;
    if bytes.len() < 8 + count {
        return Err(MmkdError::format(
            bytes.len() as u64,
            format!("truncated label data: need {} bytes, have {}", 8 + count, bytes.len()),
        ));
    }
    Ok(bytes[8..8 + count].iter().map(|&b| b as usize).collect())
}

/// Load an image/label IDX pair as a dataset.
pub fn load_idx_pair(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let (inputs, _, _) = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if labels.len() != inputs.nrows() {
        return Err(MmkdError::config(format!(
            "image count {} does not match label count {}",
            inputs.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(MmkdError::config(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(Dataset {
        ids: (0..inputs.nrows() as u64).collect(),
        inputs,
        labels,
        classes,
    })
}

/// Write images (values in `[0, 1]`) to IDX format.
pub fn save_idx_images(path: &Path, images: &Array2<f64>, rows: usize, cols: usize) -> Result<()> {
    assert_eq!(images.ncols(), rows * cols, "image width mismatch");
    let mut bytes = Vec::with_capacity(16 + images.len());
    bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(images.nrows() as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for v in images.iter() {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Write labels to IDX format.
pub fn save_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &y in labels {
        assert!(y < 256, "IDX labels are single bytes");
        bytes.push(y as u8);
    }
    fs::write(path, bytes)?;
    Ok(())
}

// ---- dataset cache ---------------------------------------------------------------

const CACHE_MAGIC: u32 = 0x4d4b_4431; // "MKD1"
const CACHE_VERSION: u32 = 1;

/// Serialize a dataset to the single-file binary cache format:
/// header `{magic, version, N, n_in, C}` then labels and row-major inputs.
pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&CACHE_MAGIC.to_le_bytes());
    bytes.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&(ds.input_dim() as u32).to_le_bytes());
    bytes.extend_from_slice(&(ds.classes as u32).to_le_bytes());
    for &y in &ds.labels {
        bytes.extend_from_slice(&(y as u32).to_le_bytes());
    }
    for v in ds.inputs.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let u32_at = |off: usize| -> Result<u32> {
        if off + 4 > bytes.len() {
            return Err(MmkdError::format(off as u64, "truncated cache header"));
        }
        Ok(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()))
    };
    let magic = u32_at(0)?;
    if magic != CACHE_MAGIC {
        return Err(MmkdError::format(0, format!("bad cache magic {magic:#010x}")));
    }
    let version = u32_at(4)?;
    if version != CACHE_VERSION {
        return Err(MmkdError::format(4, format!("unsupported cache version {version}")));
    }
    if bytes.len() < 24 {
        return Err(MmkdError::format(bytes.len() as u64, "truncated cache header"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let n_in = u32_at(16)? as usize;
    let classes = u32_at(20)? as usize;
    let need = 24 + n * 4 + n * n_in * 8;
    if bytes.len() != need {
        return Err(MmkdError::format(
            bytes.len() as u64,
            format!("cache size {} does not match header (expected {need})", bytes.len()),
        ));
    }
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let off = 24 + i * 4;
        labels.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let base = 24 + n * 4;
    let mut inputs = Array2::zeros((n, n_in));
    for i in 0..n {
        for j in 0..n_in {
            let off = base + (i * n_in + j) * 8;
            inputs[(i, j)] = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        }
    }
    Ok(Dataset {
        ids: (0..n as u64).collect(),
        inputs,
        labels,
        classes,
    })
}
