//! Labeled datasets: IDX (MNIST) and amat (MNIST-variant) loaders and a seeded synthetic
//! generator that keeps tests hermetic.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: String, found: u32, expected: u32 },
    #[error("{path}: truncated ({needed} bytes needed, {available} available)")]
    Truncated { path: String, needed: usize, available: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// `N x D` samples in `[0, 1]` with labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub dim: usize,
    pub classes: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset, checking the value-range and label invariants.
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        classes: usize,
        images: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self, DataError> {
        if dim == 0 {
            return Err(DataError::Invalid("sample dimension must be positive".into()));
        }
        if images.len() != dim * labels.len() {
            return Err(DataError::CountMismatch { images: images.len() / dim, labels: labels.len() });
        }
        if let Some(v) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Invalid(format!("label {l} outside [0, {classes})")));
        }
        Ok(Self { name: name.into(), dim, classes, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.images[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.images.chunks_exact(self.dim).zip(self.labels.iter().copied())
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            name: self.name.clone(),
            dim: self.dim,
            classes: self.classes,
            images: self.images[..n * self.dim].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Splits into `(first n, rest)`.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let part = |range: std::ops::Range<usize>, tag: &str| Dataset {
            name: format!("{}:{tag}", self.name),
            dim: self.dim,
            classes: self.classes,
            images: self.images[range.start * self.dim..range.end * self.dim].to_vec(),
            labels: self.labels[range].to_vec(),
        };
        (part(0..n, "train"), part(n..self.len(), "test"))
    }

    /// Sample indices grouped into batches, shuffled deterministically by `rng`.
    pub fn shuffled_batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

struct IdxReader<'a> {
    path: String,
    bytes: &'a [u8],
}

impl IdxReader<'_> {
    fn need(&self, n: usize) -> Result<(), DataError> {
        if self.bytes.len() < n {
            return Err(DataError::Truncated { path: self.path.clone(), needed: n, available: self.bytes.len() });
        }
        Ok(())
    }

    fn u32_at(&self, offset: usize) -> Result<u32, DataError> {
        self.need(offset + 4)?;
        let b: [u8; 4] = self.bytes[offset..offset + 4].try_into().expect("4-byte slice");
        Ok(u32::from_be_bytes(b))
    }

    /// Checks the magic and returns the dimension header.
    fn header(&self, magic: u32, ndims: usize) -> Result<Vec<usize>, DataError> {
        let found = self.u32_at(0)?;
        if found != magic {
            return Err(DataError::BadMagic { path: self.path.clone(), found, expected: magic });
        }
        (0..ndims).map(|d| self.u32_at(4 + 4 * d).map(|v| v as usize)).collect()
    }
}

/// Loads an IDX image/label pair; pixels are scaled by 1/255.
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<Dataset, DataError> {
    let image_bytes = read_file(image_path)?;
    let label_bytes = read_file(label_path)?;
    let images = IdxReader { path: image_path.display().to_string(), bytes: &image_bytes };
    let labels = IdxReader { path: label_path.display().to_string(), bytes: &label_bytes };

    let dims = images.header(IDX_IMAGE_MAGIC, 3)?;
    let (count, dim) = (dims[0], dims[1] * dims[2]);
    let pixel_start = 16;
    images.need(pixel_start + count * dim)?;

    let label_count = labels.header(IDX_LABEL_MAGIC, 1)?[0];
    let label_start = 8;
    labels.need(label_start + label_count)?;
    if label_count != count {
        return Err(DataError::CountMismatch { images: count, labels: label_count });
    }

    let pixels = image_bytes[pixel_start..pixel_start + count * dim]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let label_values: Vec<usize> =
        label_bytes[label_start..label_start + count].iter().map(|&b| usize::from(b)).collect();
    let classes = label_values.iter().max().map_or(1, |m| m + 1).max(10);
    let name = image_path.file_stem().map_or_else(|| "idx".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, dim, classes, pixels, label_values)
}

/// Writes an IDX pair (pixels rounded to bytes). Used for fixtures and exports.
pub fn write_idx(data: &Dataset, rows: u32, cols: u32, image_path: &Path, label_path: &Path) -> Result<(), DataError> {
    if (rows * cols) as usize != data.dim {
        return Err(DataError::Invalid(format!("{rows}x{cols} does not match dimension {}", data.dim)));
    }
    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
        move |source| DataError::Io { path: path.display().to_string(), source }
    }
    let mut img = Vec::with_capacity(16 + data.images.len());
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(data.len() as u32).to_be_bytes());
    img.extend_from_slice(&rows.to_be_bytes());
    img.extend_from_slice(&cols.to_be_bytes());
    img.extend(data.images.iter().map(|&v| (v * 255.0).round() as u8));
    fs::write(image_path, img).map_err(io(image_path))?;
    let mut lab = Vec::with_capacity(8 + data.len());
    lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(data.len() as u32).to_be_bytes());
    lab.extend(data.labels.iter().map(|&l| l as u8));
    fs::write(label_path, lab).map_err(io(label_path))
}

/// Loads whitespace-separated rows whose last column is the label.
pub fn load_amat(path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let path_str = path.display().to_string();
    let parse_err = |line: usize, message: String| DataError::Parse { path: path_str.clone(), line, message };
    let mut dim = None;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let mut values = Vec::new();
        for token in line.split_whitespace() {
            let v: f64 = token.parse().map_err(|_| parse_err(line_no, format!("not a number: `{token}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line_no, format!("non-finite value `{token}`")));
            }
            values.push(v);
        }
        if values.is_empty() {
            continue;
        }
        let label = values.pop().expect("non-empty row");
        if values.is_empty() {
            return Err(parse_err(line_no, "row has a label but no pixels".into()));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(parse_err(line_no, format!("expected {d} pixel columns, found {}", values.len())))
            }
            Some(_) => {}
        }
        if label < 0.0 || label.fract() != 0.0 {
            return Err(parse_err(line_no, format!("label `{label}` is not a class index")));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(parse_err(line_no, format!("pixel value {v} outside [0, 1]")));
        }
        images.extend(values);
        labels.push(label as usize);
    }
    let dim = dim.ok_or_else(|| DataError::Invalid(format!("{path_str}: no samples")))?;
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let name = path.file_stem().map_or_else(|| "amat".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, dim, classes, images, labels)
}

pub fn write_amat(data: &Dataset, path: &Path) -> Result<(), DataError> {
    let io = |source| DataError::Io { path: path.display().to_string(), source };
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for (x, label) in data.iter() {
        for v in x {
            write!(out, "{v:e} ").map_err(io)?;
        }
        writeln!(out, "{label}").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Gaussian-cluster generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    /// Per-pixel noise standard deviation.
    pub noise: f64,
    /// Cluster centers per class; more than one makes the classes non-convex.
    pub prototypes: usize,
    /// Fraction of center coordinates forced to zero, mimicking blank image background.
    pub background: f64,
}

impl SynthSpec {
    pub fn new(n: usize, dim: usize, classes: usize) -> Self {
        Self { n, dim, classes, noise: 0.15, prototypes: 1, background: 0.0 }
    }

    /// A harder, sparser, multi-modal variant closer to handwritten-digit statistics.
    pub fn digit_like(n: usize) -> Self {
        Self { n, dim: 784, classes: 10, noise: 0.35, prototypes: 3, background: 0.6 }
    }

    pub fn generate(&self, seed: u64) -> Dataset {
        assert!(self.n > 0 && self.dim > 0 && self.classes > 0, "synthetic sizes must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let protos = self.prototypes.max(1);
        let centers: Vec<Vec<f64>> = (0..self.classes * protos)
            .map(|_| {
                (0..self.dim)
                    .map(|_| if rng.random::<f64>() < self.background { 0.0 } else { rng.random::<f64>() })
                    .collect()
            })
            .collect();
        let noise = Normal::new(0.0, self.noise.max(0.0)).expect("finite noise");
        let mut images = Vec::with_capacity(self.n * self.dim);
        let mut labels = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let label = rng.random_range(0..self.classes);
            let center = &centers[label * protos + rng.random_range(0..protos)];
            images.extend(center.iter().map(|&c| (c + noise.sample(&mut rng)).clamp(0.0, 1.0)));
            labels.push(label);
        }
        Dataset::new(
            format!("synth-{}x{}-c{}-s{seed}", self.n, self.dim, self.classes),
            self.dim,
            self.classes,
            images,
            labels,
        )
        .expect("generator respects dataset invariants")
    }
}

/// `n` samples of `d` dimensions in `classes` Gaussian clusters.
pub fn synth(seed: u64, n: usize, d: usize, classes: usize) -> Dataset {
    SynthSpec::new(n, d, classes).generate(seed)
}
