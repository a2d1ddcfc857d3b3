//! Datasets: MNIST IDX ingestion, Gaussian blobs, CSV export and per-feature
//! standardization.

use std::fmt::Write as _;
use std::fs;
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng};

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

/// Standard deviations below this are treated as constant features.
pub const MIN_STD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub class_count: usize,
    /// Statistics used to standardize `features`, if they were standardized.
    pub norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Option<Vec<usize>>, class_count: usize) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::CountMismatch {
                    images: features.rows(),
                    labels: l.len(),
                });
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= class_count) {
                return Err(Error::IndexOutOfRange {
                    context: "dataset label",
                    index: bad,
                    bound: class_count,
                });
            }
        }
        Ok(Self {
            features,
            labels,
            class_count,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::invalid("dataset has no labels"))
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            features: self.features.select_rows(indices)?,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            class_count: self.class_count,
            norm: self.norm.clone(),
        })
    }

    /// First `per_class` samples of each class, visiting samples in an order
    /// shuffled by `seed`; returned in ascending file order.
    pub fn subset_per_class(&self, per_class: usize, seed: u64) -> Result<Self> {
        let labels = self.labels()?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        Rng::new(seed).shuffle(&mut order);
        let mut taken = vec![0usize; self.class_count];
        let mut keep: Vec<usize> = order
            .into_iter()
            .filter(|&i| {
                let c = &mut taken[labels[i]];
                *c += 1;
                *c <= per_class
            })
            .collect();
        keep.sort_unstable();
        self.select(&keep)
    }

    /// `label,f1,...,fd` with a header row. Unlabeled rows carry an empty label.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label");
        for f in 1..=self.dim() {
            let _ = write!(s, ",f{f}");
        }
        s.push('\n');
        for (r, row) in self.features.row_iter().enumerate() {
            if let Some(l) = &self.labels {
                let _ = write!(s, "{}", l[r]);
            }
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let header = match lines.next() {
            Some((_, h)) => h?,
            None => return Err(Error::Parse { line: 1, message: "empty CSV".into() }),
        };
        let dim = header.split(',').count() - 1;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut any_label = false;
        let mut rows = 0;
        for (lineno, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line: lineno + 1, message };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 1 {
                return Err(err(format!("expected {} fields, found {}", dim + 1, fields.len())));
            }
            if !fields[0].is_empty() {
                any_label = true;
                labels.push(fields[0].trim().parse::<usize>().map_err(|e| err(e.to_string()))?);
            }
            for f in &fields[1..] {
                data.push(f.trim().parse::<f64>().map_err(|e| err(e.to_string()))?);
            }
            rows += 1;
        }
        let features = Matrix::new(rows, dim, data)?;
        if any_label {
            let class_count = labels.iter().max().map_or(0, |m| m + 1);
            Dataset::new(features, Some(labels), class_count)
        } else {
            Dataset::new(features, None, 0)
        }
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let b = bytes.get(offset..offset + 4).ok_or(Error::Truncated {
        needed: offset + 4,
        have: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(b.try_into().unwrap()))
}

/// Raw IDX image file: `(rows, cols, pixels)` with one byte per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let magic = be_u32(bytes, 0)?;
        if magic != IDX_IMAGES_MAGIC {
            return Err(Error::WrongMagic {
                expected: IDX_IMAGES_MAGIC,
                found: magic,
            });
        }
        let count = be_u32(bytes, 4)? as usize;
        let rows = be_u32(bytes, 8)? as usize;
        let cols = be_u32(bytes, 12)? as usize;
        let needed = 16 + count * rows * cols;
        if bytes.len() < needed {
            return Err(Error::Truncated {
                needed,
                have: bytes.len(),
            });
        }
        Ok(Self {
            count,
            rows,
            cols,
            pixels: bytes[16..needed].to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len());
        for v in [IDX_IMAGES_MAGIC, self.count as u32, self.rows as u32, self.cols as u32] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::WrongMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    Ok(bytes[8..needed].to_vec())
}

pub fn idx_labels_to_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset from IDX bytes; pixels are scaled to `[0, 1]`.
pub fn dataset_from_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let images = IdxImages::parse(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if images.count != labels.len() {
        return Err(Error::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    let features = Matrix::new(
        images.count,
        images.rows * images.cols,
        images.pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    )?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, Some(labels), class_count)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    dataset_from_idx(&fs::read(images_path)?, &fs::read(labels_path)?)
}

/// MNIST train and test splits from a directory holding the four standard files.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_idx(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

/// Inverse of the `[0, 1]` pixel scaling, for writing a dataset back to IDX.
pub fn dataset_to_idx(data: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != data.dim() {
        return Err(Error::invalid(format!(
            "{rows}x{cols} images do not match {} features",
            data.dim()
        )));
    }
    let pixels = data
        .features
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let images = IdxImages {
        count: data.len(),
        rows,
        cols,
        pixels,
    };
    let labels: Vec<u8> = data.labels()?.iter().map(|&l| l as u8).collect();
    Ok((images.to_bytes(), idx_labels_to_bytes(&labels)))
}

/// `per_class` isotropic Gaussian samples around each row of `centers`,
/// labeled by center, grouped by class.
pub fn gen_blobs(centers: &Matrix, sigma: f64, per_class: usize, rng: &mut Rng) -> Result<Dataset> {
    if !(sigma > 0.0) || per_class == 0 {
        return Err(Error::invalid(format!(
            "need sigma > 0 and per_class >= 1, got {sigma} and {per_class}"
        )));
    }
    let (c, d) = centers.shape();
    let mut data = Vec::with_capacity(c * per_class * d);
    let mut labels = Vec::with_capacity(c * per_class);
    for (label, center) in centers.row_iter().enumerate() {
        for _ in 0..per_class {
            data.extend(center.iter().map(|&m| m + sigma * rng.normal()));
            labels.push(label);
        }
    }
    Dataset::new(Matrix::new(c * per_class, d, data)?, Some(labels), c)
}

pub fn fit_stats(data: &Dataset) -> NormStats {
    let (n, d) = data.features.shape();
    let mut mean = vec![0.0; d];
    for row in data.features.row_iter() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in data.features.row_iter() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
    NormStats { mean, std }
}

/// Standardizes `apply_to` with per-feature statistics of `fit_on`. Features
/// whose standard deviation is below [`MIN_STD`] are only centered.
pub fn normalize(fit_on: &Dataset, apply_to: &Dataset) -> Result<Dataset> {
    check_dims("normalize", fit_on, apply_to)?;
    Ok(apply_stats(fit_stats(fit_on), apply_to))
}

/// One mean and standard deviation over every value of the data, repeated
/// per feature.
pub fn fit_global_stats(data: &Dataset) -> NormStats {
    let values = data.features.data();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    NormStats {
        mean: vec![mean; data.dim()],
        std: vec![std; data.dim()],
    }
}

/// Shifts and scales every value of `apply_to` by the global mean and
/// standard deviation of `fit_on`, preserving relative pixel intensities.
pub fn normalize_global(fit_on: &Dataset, apply_to: &Dataset) -> Result<Dataset> {
    check_dims("normalize_global", fit_on, apply_to)?;
    Ok(apply_stats(fit_global_stats(fit_on), apply_to))
}

fn check_dims(op: &'static str, fit_on: &Dataset, apply_to: &Dataset) -> Result<()> {
    if fit_on.dim() != apply_to.dim() {
        return Err(Error::DimensionMismatch {
            op,
            left: fit_on.features.shape(),
            right: apply_to.features.shape(),
        });
    }
    Ok(())
}

fn apply_stats(stats: NormStats, apply_to: &Dataset) -> Dataset {
    let mut features = apply_to.features.clone();
    for r in 0..features.rows() {
        for ((v, m), s) in features.row_mut(r).iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v -= m;
            if *s >= MIN_STD {
                *v /= s;
            }
        }
    }
    Dataset {
        features,
        labels: apply_to.labels.clone(),
        class_count: apply_to.class_count,
        norm: Some(stats),
    }
}
