//! Feature, label and confidence files plus ingest-time normalization.
//!
//! All three file kinds share a 4-byte magic and a little-endian `u32`
//! format version. Payloads are little-endian and row-major.
//!
//! ```text
//! features     "OODF" | version u32 | n u64 | d u32 | dtype u8 (1 = f32) | 3 x 0u8 | n*d f32
//! labels       "OODL" | version u32 | n u64 | n i32
//! confidences  "OODC" | version u32 | n u64 | M u32 | n*M f32
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const FEATURE_MAGIC: [u8; 4] = *b"OODF";
pub const LABEL_MAGIC: [u8; 4] = *b"OODL";
pub const CONFIDENCE_MAGIC: [u8; 4] = *b"OODC";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;

/// Below this norm a vector is treated as corrupt rather than normalized.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0} (expected {FORMAT_VERSION})")]
    VersionMismatch(u32),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("vector at row {row} has zero norm")]
    ZeroNorm { row: usize },
    #[error("confidence {value} at row {row} is outside [0, 1]")]
    ConfidenceOutOfRange { row: usize, value: f32 },
    #[error("io failure: {0}")]
    Io(#[from] io::Error),
}

/// Dense row-major `n x d` matrix of `f32` feature rows.
///
/// Used both for raw batches read from disk and for the unit-norm key
/// matrices the scoring kernels consume.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    data: Vec<f32>,
    dim: usize,
}

impl FeatureBatch {
    pub fn new(data: Vec<f32>, dim: usize) -> Result<Self, FormatError> {
        if dim == 0 {
            return Err(FormatError::DimensionMismatch { expected: 1, found: 0 });
        }
        if data.len() % dim != 0 {
            return Err(FormatError::DimensionMismatch {
                expected: dim,
                found: data.len() % dim,
            });
        }
        Ok(Self { data, dim })
    }

    pub fn empty(dim: usize) -> Self {
        assert!(dim > 0, "feature dimension must be positive");
        Self { data: Vec::new(), dim }
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R], dim: usize) -> Result<Self, FormatError> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(FormatError::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(data, dim)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<(), FormatError> {
        if row.len() != self.dim {
            return Err(FormatError::DimensionMismatch {
                expected: self.dim,
                found: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    /// Gathers the given rows, in the given order, into a new batch.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { data, dim: self.dim }
    }

    pub fn concat(&self, other: &Self) -> Result<Self, FormatError> {
        if other.dim != self.dim {
            return Err(FormatError::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Self { data, dim: self.dim })
    }

    pub fn check_finite(&self) -> Result<(), FormatError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(pos) => Err(FormatError::NonFiniteValue {
                row: pos / self.dim,
                col: pos % self.dim,
            }),
            None => Ok(()),
        }
    }
}

/// Returns `v / ||v||`, accumulating the norm in `f64`.
pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>, FormatError> {
    let mut out = v.to_vec();
    normalize_in_place(&mut out).map_err(|_| FormatError::ZeroNorm { row: 0 })?;
    Ok(out)
}

fn normalize_in_place(v: &mut [f32]) -> Result<(), ()> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if !(norm >= MIN_NORM) {
        return Err(());
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
    Ok(())
}

/// Normalizes every row of `batch` to unit L2 norm.
pub fn normalize_batch(mut batch: FeatureBatch) -> Result<FeatureBatch, FormatError> {
    batch.check_finite()?;
    let dim = batch.dim;
    for (row, chunk) in batch.data.chunks_exact_mut(dim).enumerate() {
        normalize_in_place(chunk).map_err(|_| FormatError::ZeroNorm { row })?;
    }
    Ok(batch)
}

// --- binary io -------------------------------------------------------------

fn read_magic(r: &mut impl Read, expected: [u8; 4]) -> Result<(), FormatError> {
    let mut found = [0u8; 4];
    read_header_bytes(r, &mut found)?;
    if found != expected {
        return Err(FormatError::BadMagic { expected, found });
    }
    let mut ver = [0u8; 4];
    read_header_bytes(r, &mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != FORMAT_VERSION {
        return Err(FormatError::VersionMismatch(version));
    }
    Ok(())
}

fn read_header_bytes(r: &mut impl Read, buf: &mut [u8]) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FormatError::TruncatedPayload {
            expected: buf.len() as u64,
            found: 0,
        },
        _ => FormatError::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, FormatError> {
    let mut b = [0u8; 4];
    read_header_bytes(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, FormatError> {
    let mut b = [0u8; 8];
    read_header_bytes(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads exactly `count` 4-byte words and rejects any trailing data.
fn read_payload_words(r: &mut impl Read, count: u64) -> Result<Vec<[u8; 4]>, FormatError> {
    let expected = count
        .checked_mul(4)
        .ok_or(FormatError::TruncatedPayload { expected: u64::MAX, found: 0 })?;
    let mut bytes = Vec::new();
    r.take(expected).read_to_end(&mut bytes)?;
    if (bytes.len() as u64) < expected {
        return Err(FormatError::TruncatedPayload {
            expected,
            found: bytes.len() as u64,
        });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(FormatError::TrailingBytes(rest.len() as u64));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect())
}

pub fn read_features_from(mut r: impl Read) -> Result<FeatureBatch, FormatError> {
    read_magic(&mut r, FEATURE_MAGIC)?;
    let n = read_u64(&mut r)?;
    let d = read_u32(&mut r)? as usize;
    let mut tail = [0u8; 4];
    read_header_bytes(&mut r, &mut tail)?;
    if tail[0] != DTYPE_F32 {
        return Err(FormatError::UnsupportedDtype(tail[0]));
    }
    if d == 0 {
        return Err(FormatError::DimensionMismatch { expected: 1, found: 0 });
    }
    let words = read_payload_words(&mut r, n.saturating_mul(d as u64))?;
    let data: Vec<f32> = words.into_iter().map(f32::from_le_bytes).collect();
    let batch = FeatureBatch { data, dim: d };
    batch.check_finite()?;
    Ok(batch)
}

pub fn write_features_to(batch: &FeatureBatch, mut w: impl Write) -> Result<(), FormatError> {
    batch.check_finite()?;
    w.write_all(&FEATURE_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(batch.len() as u64).to_le_bytes())?;
    w.write_all(&(batch.dim as u32).to_le_bytes())?;
    w.write_all(&[DTYPE_F32, 0, 0, 0])?;
    for v in &batch.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureBatch, FormatError> {
    read_features_from(BufReader::new(File::open(path)?))
}

pub fn write_feature_file(batch: &FeatureBatch, path: impl AsRef<Path>) -> Result<(), FormatError> {
    // Validate before touching the filesystem so a bad batch leaves no file.
    batch.check_finite()?;
    write_features_to(batch, BufWriter::new(File::create(path)?))
}

/// Reads a feature file and normalizes every row.
pub fn load_normalized(path: impl AsRef<Path>) -> Result<FeatureBatch, FormatError> {
    normalize_batch(read_feature_file(path)?)
}

pub fn read_labels_from(mut r: impl Read) -> Result<Vec<i32>, FormatError> {
    read_magic(&mut r, LABEL_MAGIC)?;
    let n = read_u64(&mut r)?;
    let words = read_payload_words(&mut r, n)?;
    Ok(words.into_iter().map(i32::from_le_bytes).collect())
}

pub fn write_labels_to(labels: &[i32], mut w: impl Write) -> Result<(), FormatError> {
    w.write_all(&LABEL_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(labels.len() as u64).to_le_bytes())?;
    for v in labels {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_label_file(path: impl AsRef<Path>) -> Result<Vec<i32>, FormatError> {
    read_labels_from(BufReader::new(File::open(path)?))
}

pub fn write_label_file(labels: &[i32], path: impl AsRef<Path>) -> Result<(), FormatError> {
    write_labels_to(labels, BufWriter::new(File::create(path)?))
}

/// Per-sample crop confidences, `n x M`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Confidences {
    pub values: Vec<f32>,
    pub crops: usize,
}

impl Confidences {
    pub fn new(values: Vec<f32>, crops: usize) -> Result<Self, FormatError> {
        if crops == 0 || values.len() % crops != 0 {
            return Err(FormatError::DimensionMismatch {
                expected: crops.max(1),
                found: values.len() % crops.max(1),
            });
        }
        for (row, &value) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(FormatError::ConfidenceOutOfRange { row: row / crops, value });
            }
        }
        Ok(Self { values, crops })
    }

    pub fn samples(&self) -> usize {
        self.values.len() / self.crops
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.values[i * self.crops..(i + 1) * self.crops]
    }
}

pub fn read_confidences_from(mut r: impl Read) -> Result<Confidences, FormatError> {
    read_magic(&mut r, CONFIDENCE_MAGIC)?;
    let n = read_u64(&mut r)?;
    let m = read_u32(&mut r)? as usize;
    if m == 0 {
        return Err(FormatError::DimensionMismatch { expected: 1, found: 0 });
    }
    let words = read_payload_words(&mut r, n.saturating_mul(m as u64))?;
    let values: Vec<f32> = words.into_iter().map(f32::from_le_bytes).collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFiniteValue { row: pos / m, col: pos % m });
    }
    Confidences::new(values, m)
}

pub fn write_confidences_to(conf: &Confidences, mut w: impl Write) -> Result<(), FormatError> {
    w.write_all(&CONFIDENCE_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(conf.samples() as u64).to_le_bytes())?;
    w.write_all(&(conf.crops as u32).to_le_bytes())?;
    for v in &conf.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_confidence_file(path: impl AsRef<Path>) -> Result<Confidences, FormatError> {
    read_confidences_from(BufReader::new(File::open(path)?))
}

pub fn write_confidence_file(conf: &Confidences, path: impl AsRef<Path>) -> Result<(), FormatError> {
    write_confidences_to(conf, BufWriter::new(File::create(path)?))
}

/// One training sample's crops: `M` feature rows and their confidences.
#[derive(Debug, Clone, Copy)]
pub struct CropRecord<'a> {
    pub sample_id: usize,
    pub class_label: i32,
    pub crop_features: &'a [f32],
    pub crop_confidences: &'a [f32],
    pub dim: usize,
}

impl<'a> CropRecord<'a> {
    pub fn crop(&self, m: usize) -> &'a [f32] {
        &self.crop_features[m * self.dim..(m + 1) * self.dim]
    }
}

/// A crop store: `n * M` normalized rows in sample-major order, with labels
/// and per-crop confidences.
#[derive(Debug, Clone)]
pub struct CropStore {
    features: FeatureBatch,
    confidences: Confidences,
    labels: Vec<i32>,
}

impl CropStore {
    pub fn new(
        features: FeatureBatch,
        confidences: Confidences,
        labels: Vec<i32>,
    ) -> Result<Self, FormatError> {
        let n = labels.len();
        if confidences.samples() != n {
            return Err(FormatError::DimensionMismatch {
                expected: n,
                found: confidences.samples(),
            });
        }
        if features.len() != n * confidences.crops {
            return Err(FormatError::DimensionMismatch {
                expected: n * confidences.crops,
                found: features.len(),
            });
        }
        let features = normalize_batch(features)?;
        Ok(Self { features, confidences, labels })
    }

    pub fn load(
        crops: impl AsRef<Path>,
        confs: impl AsRef<Path>,
        labels: impl AsRef<Path>,
    ) -> Result<Self, FormatError> {
        Self::new(
            read_feature_file(crops)?,
            read_confidence_file(confs)?,
            read_label_file(labels)?,
        )
    }

    pub fn samples(&self) -> usize {
        self.labels.len()
    }

    pub fn crops_per_sample(&self) -> usize {
        self.confidences.crops
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    pub fn record(&self, i: usize) -> CropRecord<'_> {
        let m = self.confidences.crops;
        let d = self.features.dim();
        CropRecord {
            sample_id: i,
            class_label: self.labels[i],
            crop_features: &self.features.as_slice()[i * m * d..(i + 1) * m * d],
            crop_confidences: self.confidences.sample(i),
            dim: d,
        }
    }

    pub fn records(&self) -> impl ExactSizeIterator<Item = CropRecord<'_>> + '_ {
        (0..self.samples()).map(move |i| self.record(i))
    }

    pub fn features(&self) -> &FeatureBatch {
        &self.features
    }

    pub fn confidences(&self) -> &Confidences {
        &self.confidences
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }
}
