//! Dataset ingestion: IDX container parsing and writing, synthetic
//! Gaussian-cluster generation, and seed-deterministic splitting.
//!
//! Pixels are stored as reals in [0,1] (byte value / 255) with no further
//! preprocessing.

use std::path::Path;

use crate::math::{label, Matrix, RngStream};
use crate::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<u8>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<u8>, classes: usize) -> Result<Dataset> {
        if inputs.rows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} input rows vs {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 classes, got {classes}")));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::InvalidParameter(format!("label {l} outside {classes} classes")));
        }
        Ok(Dataset { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// First `n` examples, in stored order.
    pub fn head(&self, n: usize) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::InvalidParameter(format!(
                "requested {n} examples, dataset has {}",
                self.len()
            )));
        }
        self.select(&(0..n).collect::<Vec<_>>())
    }

    fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let d = self.dim();
        let mut inputs = Matrix::zeros(indices.len(), d);
        let mut labels = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            inputs.row_mut(r).copy_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(inputs, labels, self.classes)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(s) => Ok(u32::from_be_bytes(s.try_into().unwrap())),
        None => Err(Error::Parse { offset, message: "unexpected end of file".into() }),
    }
}

/// Parse a pair of big-endian IDX files (images then labels) into a dataset.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = std::fs::read(images_path)?;
    let magic = be_u32(&img, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("unexpected magic {magic:#010x} (images expect {IMAGES_MAGIC:#010x})"),
        });
    }
    let n = be_u32(&img, 4)? as usize;
    let rows = be_u32(&img, 8)? as usize;
    let cols = be_u32(&img, 12)? as usize;
    let d = rows * cols;
    let pixel_start = 16;
    if img.len() != pixel_start + n * d {
        return Err(Error::Parse {
            offset: img.len().min(pixel_start + n * d),
            message: format!("expected {} pixel bytes, file holds {}", n * d, img.len() - pixel_start.min(img.len())),
        });
    }

    let lab = std::fs::read(labels_path)?;
    let magic = be_u32(&lab, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("unexpected magic {magic:#010x} (labels expect {LABELS_MAGIC:#010x})"),
        });
    }
    let n_labels = be_u32(&lab, 4)? as usize;
    if n_labels != n {
        return Err(Error::Parse {
            offset: 4,
            message: format!("{n} images but {n_labels} labels"),
        });
    }
    let label_start = 8;
    if lab.len() != label_start + n {
        return Err(Error::Parse {
            offset: lab.len().min(label_start + n),
            message: format!("expected {n} label bytes, file holds {}", lab.len() - label_start.min(lab.len())),
        });
    }

    let inputs = Matrix::from_fn(n, d, |r, c| img[pixel_start + r * d + c] as f64 / 255.0);
    let labels = lab[label_start..].to_vec();
    let classes = labels.iter().copied().max().map_or(2, |m| (m as usize + 1).max(2));
    Dataset::new(inputs, labels, classes)
}

/// Write a dataset back to the IDX pair. Inputs must be byte-quantized
/// (value·255 integral), which holds for anything `load_idx` produced.
pub fn save_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let n = ds.len();
    let d = ds.dim();
    let mut img = Vec::with_capacity(16 + n * d);
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&1u32.to_be_bytes());
    img.extend_from_slice(&(d as u32).to_be_bytes());
    for &v in ds.inputs.data() {
        let byte = (v * 255.0).round();
        if !(0.0..=255.0).contains(&byte) || (byte - v * 255.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "pixel value {v} is not byte-quantized"
            )));
        }
        img.push(byte as u8);
    }
    std::fs::write(images_path, img)?;

    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(&ds.labels);
    std::fs::write(labels_path, lab)?;
    Ok(())
}

/// Class-conditional Gaussian blobs: class c gets a mean placed
/// `separation` away from the origin (axis-aligned when d >= classes,
/// random directions otherwise) with unit-variance noise.
pub fn synth_gaussian_clusters(
    n: usize,
    classes: usize,
    d: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || classes < 2 || d == 0 {
        return Err(Error::InvalidParameter(format!(
            "need n>0, classes>=2, d>0; got n={n} classes={classes} d={d}"
        )));
    }
    let base = RngStream::new(seed, label("synth"));
    let mut means = vec![vec![0.0; d]; classes];
    if d >= classes {
        for (c, mean) in means.iter_mut().enumerate() {
            mean[c] = separation;
        }
    } else {
        let mut mrng = base.derive(0);
        for mean in means.iter_mut() {
            let raw: Vec<f64> = (0..d).map(|_| mrng.gaussian(0.0, 1.0)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for (m, r) in mean.iter_mut().zip(raw) {
                *m = separation * r / norm;
            }
        }
    }
    let mut inputs = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let mut erng = base.derive(1 + i as u64);
        let row = inputs.row_mut(i);
        for (j, r) in row.iter_mut().enumerate() {
            *r = means[c][j] + erng.gaussian(0.0, 1.0);
        }
        labels.push(c as u8);
    }
    Dataset::new(inputs, labels, classes)
}

/// Shuffle deterministically and cut into three disjoint, exhaustive parts.
pub fn split(
    ds: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (f1, f2, f3) = fractions;
    if f1 < 0.0 || f2 < 0.0 || f3 < 0.0 || (f1 + f2 + f3 - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "split fractions ({f1}, {f2}, {f3}) must be non-negative and sum to 1"
        )));
    }
    let n = ds.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::new(seed, label("split"));
    rng.shuffle(&mut idx);
    let n1 = (f1 * n as f64).round() as usize;
    let n2 = ((f2 * n as f64).round() as usize).min(n - n1);
    let train = ds.select(&idx[..n1])?;
    let valid = ds.select(&idx[n1..n1 + n2])?;
    let test = ds.select(&idx[n1 + n2..])?;
    Ok((train, valid, test))
}
