//! Feature loading with a per-process cache.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use bristle_core::features::{extract_mnist, read_feature_file, FeatureTable, MNIST_FILES};

use crate::config::{ExperimentConfig, ExtractorKind};

/// Train and test features for one extractor setting.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Arc<FeatureTable>,
    pub test: Arc<FeatureTable>,
    pub extractor_kind: &'static str,
    /// Parameters of the frozen layers that a full-model exchange would also send.
    pub declared_params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum CacheKey {
    Projection {
        dir: PathBuf,
        dim: usize,
        seed: u64,
        slope_bits: u64,
    },
    Precomputed([PathBuf; 4]),
}

fn cache_key(config: &ExperimentConfig) -> CacheKey {
    let (d, e) = (&config.data, &config.extractor);
    match e.kind {
        ExtractorKind::RandomProjection => CacheKey::Projection {
            dir: d.mnist_dir.clone(),
            dim: e.dim,
            seed: e.seed,
            slope_bits: e.leaky_slope.to_bits(),
        },
        ExtractorKind::Precomputed => CacheKey::Precomputed([
            d.train_features.clone(),
            d.train_labels.clone(),
            d.test_features.clone(),
            d.test_labels.clone(),
        ]),
    }
}

/// Reuses extracted features across scenarios that share data settings.
#[derive(Debug, Default)]
pub struct DataCache {
    entries: HashMap<CacheKey, LoadedData>,
}

impl DataCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(&mut self, config: &ExperimentConfig) -> Result<LoadedData> {
        let key = cache_key(config);
        if let Some(hit) = self.entries.get(&key) {
            return Ok(hit.clone());
        }
        let loaded = load(config)?;
        self.entries.insert(key, loaded.clone());
        Ok(loaded)
    }
}

/// Explains how to obtain MNIST when the directory is incomplete.
pub fn check_mnist_dir(dir: &Path) -> Result<()> {
    let missing: Vec<&str> = MNIST_FILES.iter().copied().filter(|f| !dir.join(f).is_file()).collect();
    if !missing.is_empty() {
        bail!(
            "MNIST files missing from {}: {}\n\
             fetch them with:\n  \
             npm pack mnist-data && tar xzf mnist-data-*.tgz && mkdir -p {dir} && cp package/*-ubyte {dir}/\n\
             or point data.mnist_dir (or --data) at a directory holding the four uncompressed IDX files",
            dir.display(),
            missing.join(", "),
            dir = dir.display(),
        );
    }
    Ok(())
}

pub fn load(config: &ExperimentConfig) -> Result<LoadedData> {
    let (d, e) = (&config.data, &config.extractor);
    match e.kind {
        ExtractorKind::RandomProjection => {
            check_mnist_dir(&d.mnist_dir)?;
            let splits = extract_mnist(&d.mnist_dir, e.dim, e.seed, e.leaky_slope)
                .with_context(|| format!("extracting features from {}", d.mnist_dir.display()))?;
            let own = splits.extractor.declared_param_count();
            Ok(LoadedData {
                train: Arc::new(splits.train),
                test: Arc::new(splits.test),
                extractor_kind: splits.extractor.kind(),
                declared_params: if e.declared_params > 0 { e.declared_params } else { own },
            })
        }
        ExtractorKind::Precomputed => {
            let train = read_feature_file(&d.train_features, &d.train_labels)
                .with_context(|| format!("reading {}", d.train_features.display()))?;
            let test = read_feature_file(&d.test_features, &d.test_labels)
                .with_context(|| format!("reading {}", d.test_features.display()))?;
            Ok(LoadedData {
                train: Arc::new(train),
                test: Arc::new(test),
                extractor_kind: ExtractorKind::Precomputed.as_str(),
                declared_params: e.declared_params,
            })
        }
    }
}
