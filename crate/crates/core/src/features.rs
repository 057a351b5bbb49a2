//! Frozen feature extraction and raw dataset ingestion.
//!
//! Only the output layer is ever trained, so every sample is mapped through a
//! fixed extractor exactly once. Two extractors are provided: a table of
//! features computed offline by some external model, and a seeded random
//! projection followed by a leaky ReLU.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const FEATURE_FILE_MAGIC: &[u8; 4] = b"BRFE";
pub const FEATURE_FILE_VERSION: u32 = 1;
pub const FEATURE_FILE_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Raw input vectors with their labels.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub inputs: Array2<f32>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl RawDataset {
    pub fn new(inputs: Array2<f32>, labels: Vec<usize>, split: Split) -> Result<Self, FeatureError> {
        if inputs.nrows() != labels.len() {
            return Err(FeatureError::Shape {
                expected: inputs.nrows(),
                actual: labels.len(),
            });
        }
        Ok(Self { inputs, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }
}

/// Per-column mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ZScoreStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScoreStats {
    pub fn from_dataset(data: &RawDataset) -> Result<Self, FeatureError> {
        if data.is_empty() {
            return Err(FeatureError::Empty);
        }
        let n = data.len() as f64;
        let d = data.input_dim();
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for row in data.inputs.rows() {
            for (j, &v) in row.iter().enumerate() {
                mean[j] += v as f64;
                sq[j] += (v as f64) * (v as f64);
            }
        }
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= n;
                let var = (s / n - *m * *m).max(0.0);
                let sd = var.sqrt();
                // constant columns map to zero rather than dividing by zero
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }
}

/// Z-score normalises `data`. With `stats == None` the statistics are computed
/// from `data` itself (the training split); pass the training statistics to
/// normalise a test split.
pub fn z_score_normalize(
    mut data: RawDataset,
    stats: Option<&ZScoreStats>,
) -> Result<(RawDataset, ZScoreStats), FeatureError> {
    if data.is_empty() {
        return Err(FeatureError::Empty);
    }
    let stats = match stats {
        Some(s) => {
            if s.mean.len() != data.input_dim() || s.std.len() != data.input_dim() {
                return Err(FeatureError::Shape {
                    expected: data.input_dim(),
                    actual: s.mean.len(),
                });
            }
            s.clone()
        }
        None => ZScoreStats::from_dataset(&data)?,
    };
    for mut row in data.inputs.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = ((*v as f64 - stats.mean[j]) / stats.std[j]) as f32;
        }
    }
    Ok((data, stats))
}

/// Extracted features for a whole split, shared read-only by every peer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl FeatureTable {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self, FeatureError> {
        if features.nrows() != labels.len() {
            return Err(FeatureError::Shape {
                expected: features.nrows(),
                actual: labels.len(),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Copies the given rows into a dense matrix.
    pub fn gather(&self, ids: &[usize]) -> Array2<f64> {
        self.features.select(Axis(0), ids)
    }
}

/// Seeded `F x D` projection with standard normal entries followed by a leaky ReLU.
#[derive(Debug, Clone)]
pub struct RandomProjection {
    projection: Array2<f32>,
    seed: u64,
    leaky_slope: f32,
}

impl RandomProjection {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64, leaky_slope: f64) -> Result<Self, FeatureError> {
        if input_dim == 0 || output_dim == 0 {
            return Err(FeatureError::Invalid(format!(
                "projection dimensions must be positive, got {output_dim}x{input_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).expect("positive std");
        let projection = Array2::from_shape_simple_fn((output_dim, input_dim), || normal.sample(&mut rng));
        Ok(Self {
            projection,
            seed,
            leaky_slope: leaky_slope as f32,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.projection.len()
    }

    pub fn projection(&self) -> ArrayView2<'_, f32> {
        self.projection.view()
    }

    pub fn extract(&self, raw: &[f32]) -> Result<Array1<f64>, FeatureError> {
        let row = ArrayView2::from_shape((1, raw.len()), raw).expect("one row");
        Ok(self.extract_batch(row)?.row(0).to_owned())
    }

    pub fn extract_batch(&self, inputs: ArrayView2<'_, f32>) -> Result<Array2<f64>, FeatureError> {
        if inputs.ncols() != self.input_dim() {
            return Err(FeatureError::Shape {
                expected: self.input_dim(),
                actual: inputs.ncols(),
            });
        }
        const CHUNK: usize = 4096;
        let mut out = Array2::zeros((inputs.nrows(), self.output_dim()));
        let pt = self.projection.t();
        let slope = self.leaky_slope;
        let mut start = 0;
        while start < inputs.nrows() {
            let end = (start + CHUNK).min(inputs.nrows());
            let block = inputs.slice(s![start..end, ..]).dot(&pt);
            out.slice_mut(s![start..end, ..])
                .zip_mut_with(&block, |o, &v| *o = if v >= 0.0 { v as f64 } else { (slope * v) as f64 });
            start = end;
        }
        Ok(out)
    }
}

/// Features computed offline, looked up by sample id.
#[derive(Debug, Clone)]
pub struct PrecomputedFeatures {
    pub table: FeatureTable,
    pub declared_params: usize,
}

#[derive(Debug, Clone)]
pub enum FeatureExtractor {
    Precomputed(PrecomputedFeatures),
    RandomProjection(RandomProjection),
}

#[derive(Debug, Clone, Copy)]
pub enum ExtractInput<'a> {
    Raw(&'a [f32]),
    Stored(usize),
}

impl FeatureExtractor {
    pub fn kind(&self) -> &'static str {
        match self {
            FeatureExtractor::Precomputed(_) => "precomputed",
            FeatureExtractor::RandomProjection(_) => "random-projection",
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            FeatureExtractor::Precomputed(p) => p.table.feature_dim(),
            FeatureExtractor::RandomProjection(r) => r.output_dim(),
        }
    }

    /// Parameter count of the frozen non-output layers, used for
    /// communication accounting against a full-model exchange.
    pub fn declared_param_count(&self) -> usize {
        match self {
            FeatureExtractor::Precomputed(p) => p.declared_params,
            FeatureExtractor::RandomProjection(r) => r.param_count(),
        }
    }

    pub fn extract(&self, input: ExtractInput<'_>) -> Result<Array1<f64>, FeatureError> {
        match (self, input) {
            (FeatureExtractor::RandomProjection(r), ExtractInput::Raw(raw)) => r.extract(raw),
            (FeatureExtractor::Precomputed(p), ExtractInput::Stored(id)) => {
                if id >= p.table.len() {
                    return Err(FeatureError::Invalid(format!(
                        "sample {id} not in a table of {} rows",
                        p.table.len()
                    )));
                }
                Ok(p.table.features.row(id).to_owned())
            }
            (fe, _) => Err(FeatureError::Invalid(format!(
                "{} extractor cannot handle this input kind",
                fe.kind()
            ))),
        }
    }

    /// Maps a whole raw dataset to a feature table.
    pub fn extract_dataset(&self, data: &RawDataset) -> Result<FeatureTable, FeatureError> {
        match self {
            FeatureExtractor::RandomProjection(r) => {
                FeatureTable::new(r.extract_batch(data.inputs.view())?, data.labels.clone())
            }
            FeatureExtractor::Precomputed(_) => Err(FeatureError::Invalid(
                "precomputed extractor has no raw-input path".into(),
            )),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, FeatureError> {
    fs::read(path).map_err(|source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

fn le_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

fn format_err(path: &Path, reason: impl Into<String>) -> FeatureError {
    FeatureError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Loads an IDX image/label file pair, scaling pixel bytes to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<RawDataset, FeatureError> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;

    if images.len() < 16 {
        return Err(format_err(images_path, "truncated header"));
    }
    if be_u32(&images, 0) != IDX_IMAGES_MAGIC {
        return Err(format_err(
            images_path,
            format!("bad magic {:#010x}, expected {IDX_IMAGES_MAGIC:#010x}", be_u32(&images, 0)),
        ));
    }
    let count = be_u32(&images, 4) as usize;
    let rows = be_u32(&images, 8) as usize;
    let cols = be_u32(&images, 12) as usize;
    let dim = rows * cols;
    if images.len() != 16 + count * dim {
        return Err(format_err(
            images_path,
            format!("expected {} bytes for {count} images of {rows}x{cols}, found {}", 16 + count * dim, images.len()),
        ));
    }

    if labels.len() < 8 {
        return Err(format_err(labels_path, "truncated header"));
    }
    if be_u32(&labels, 0) != IDX_LABELS_MAGIC {
        return Err(format_err(
            labels_path,
            format!("bad magic {:#010x}, expected {IDX_LABELS_MAGIC:#010x}", be_u32(&labels, 0)),
        ));
    }
    let label_count = be_u32(&labels, 4) as usize;
    if label_count != count {
        return Err(format_err(
            labels_path,
            format!("{label_count} labels for {count} images"),
        ));
    }
    if labels.len() != 8 + label_count {
        return Err(format_err(
            labels_path,
            format!("expected {} bytes, found {}", 8 + label_count, labels.len()),
        ));
    }

    let pixels: Vec<f32> = images[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let inputs = Array2::from_shape_vec((count, dim), pixels).expect("length checked");
    let labels = labels[8..].iter().map(|&b| b as usize).collect();
    RawDataset::new(inputs, labels, split)
}

/// Writes a feature table as a `BRFE` file plus a parallel one-byte-per-sample label file.
pub fn write_feature_file(table: &FeatureTable, features_path: &Path, labels_path: &Path) -> Result<(), FeatureError> {
    let (n, f) = table.features.dim();
    let mut out = Vec::with_capacity(FEATURE_FILE_HEADER_LEN + 4 * n * f);
    out.extend_from_slice(FEATURE_FILE_MAGIC);
    out.extend_from_slice(&FEATURE_FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    for v in table.features.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut labels = Vec::with_capacity(n);
    for &l in &table.labels {
        let byte = u8::try_from(l).map_err(|_| FeatureError::Invalid(format!("label {l} does not fit in a byte")))?;
        labels.push(byte);
    }
    fs::write(features_path, out).map_err(|source| FeatureError::Io {
        path: features_path.to_path_buf(),
        source,
    })?;
    fs::write(labels_path, labels).map_err(|source| FeatureError::Io {
        path: labels_path.to_path_buf(),
        source,
    })
}

pub fn read_feature_file(features_path: &Path, labels_path: &Path) -> Result<FeatureTable, FeatureError> {
    let bytes = read_file(features_path)?;
    if bytes.len() < FEATURE_FILE_HEADER_LEN {
        return Err(format_err(features_path, "truncated header"));
    }
    if &bytes[0..4] != FEATURE_FILE_MAGIC {
        return Err(format_err(features_path, "bad magic, expected BRFE"));
    }
    let version = le_u32(&bytes, 4);
    if version != FEATURE_FILE_VERSION {
        return Err(format_err(features_path, format!("unsupported version {version}")));
    }
    let n = le_u32(&bytes, 8) as usize;
    let f = le_u32(&bytes, 12) as usize;
    if bytes.len() != FEATURE_FILE_HEADER_LEN + 4 * n * f {
        return Err(format_err(
            features_path,
            format!("expected {} bytes for {n}x{f} features, found {}", FEATURE_FILE_HEADER_LEN + 4 * n * f, bytes.len()),
        ));
    }
    let labels = read_file(labels_path)?;
    if labels.len() != n {
        return Err(format_err(labels_path, format!("{} labels for {n} feature rows", labels.len())));
    }
    let values = bytes[FEATURE_FILE_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let features = Array2::from_shape_vec((n, f), values).expect("length checked");
    FeatureTable::new(features, labels.into_iter().map(usize::from).collect())
}

/// Standard MNIST file names inside a data directory.
pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Train and test feature tables built from raw IDX files.
#[derive(Debug, Clone)]
pub struct ExtractedSplits {
    pub train: FeatureTable,
    pub test: FeatureTable,
    pub extractor: FeatureExtractor,
}

/// Loads MNIST from `dir`, normalises both splits with training statistics and
/// passes them through a seeded random projection.
pub fn extract_mnist(dir: &Path, output_dim: usize, seed: u64, leaky_slope: f64) -> Result<ExtractedSplits, FeatureError> {
    let path = |name: &str| dir.join(name);
    let train = load_idx(&path(MNIST_FILES[0]), &path(MNIST_FILES[1]), Split::Train)?;
    let test = load_idx(&path(MNIST_FILES[2]), &path(MNIST_FILES[3]), Split::Test)?;
    let (train, stats) = z_score_normalize(train, None)?;
    let (test, _) = z_score_normalize(test, Some(&stats))?;
    let extractor = FeatureExtractor::RandomProjection(RandomProjection::new(
        train.input_dim(),
        output_dim,
        seed,
        leaky_slope,
    )?);
    Ok(ExtractedSplits {
        train: extractor.extract_dataset(&train)?,
        test: extractor.extract_dataset(&test)?,
        extractor,
    })
}
