//! Class-sharded data distribution across peers.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("peer shard holds no samples")]
    EmptyShard,
}

/// A sample id in the shared training table together with the label the
/// owning peer sees for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Sample {
    pub id: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionConfig {
    /// Fraction of classes each peer holds.
    pub class_coverage: f64,
    /// Samples of each held class given to each peer. `None` splits every
    /// class evenly over its holders.
    pub samples_per_class: Option<usize>,
    /// Draw each peer's classes at random instead of the consecutive window.
    pub random_classes: bool,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            class_coverage: 0.4,
            samples_per_class: None,
            random_classes: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassShard {
    pub class: usize,
    pub shard_index: usize,
    pub samples: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardAssignment {
    pub shards_per_peer: usize,
    pub class_coverage: f64,
    pub peers: Vec<Vec<ClassShard>>,
}

impl ShardAssignment {
    pub fn peer_classes(&self, peer: usize) -> Vec<usize> {
        self.peers[peer].iter().map(|s| s.class).collect()
    }

    pub fn peer_samples(&self, peer: usize) -> Vec<Sample> {
        self.peers[peer]
            .iter()
            .flat_map(|shard| shard.samples.iter().map(move |&id| Sample { id, label: shard.class }))
            .collect()
    }
}

/// Number of classes a peer holds for a given coverage.
pub fn classes_per_peer(class_coverage: f64, num_classes: usize) -> Result<usize, PartitionError> {
    if !(class_coverage > 0.0 && class_coverage <= 1.0) {
        return Err(PartitionError::Config(format!(
            "class coverage {class_coverage} outside (0, 1]"
        )));
    }
    let exact = class_coverage * num_classes as f64;
    let k = exact.round();
    if (exact - k).abs() > 1e-9 || k < 1.0 {
        return Err(PartitionError::Config(format!(
            "class coverage {class_coverage} of {num_classes} classes is not a whole number of classes"
        )));
    }
    Ok(k as usize)
}

/// Consecutive window `{peer, peer+1, ...} mod C` of `k` classes.
pub fn consecutive_classes(peer: usize, k: usize, num_classes: usize) -> Vec<usize> {
    (0..k).map(|j| (peer + j) % num_classes).collect()
}

/// Gives every peer `round(coverage * C)` classes and, for each class, a
/// disjoint uniformly shuffled shard of that class's samples.
pub fn assign_shards(
    labels: &[usize],
    num_classes: usize,
    n_peers: usize,
    cfg: &PartitionConfig,
    seed: u64,
) -> Result<ShardAssignment, PartitionError> {
    if n_peers == 0 {
        return Err(PartitionError::Config("need at least one peer".into()));
    }
    let k = classes_per_peer(cfg.class_coverage, num_classes)?;

    let peer_classes: Vec<Vec<usize>> = if cfg.random_classes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let all: Vec<usize> = (0..num_classes).collect();
        (0..n_peers)
            .map(|_| {
                let mut picked: Vec<usize> = all.choose_multiple(&mut rng, k).copied().collect();
                picked.sort_unstable();
                picked
            })
            .collect()
    } else {
        (0..n_peers).map(|p| consecutive_classes(p, k, num_classes)).collect()
    };

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (id, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(PartitionError::Config(format!(
                "sample {id} has label {label}, outside {num_classes} classes"
            )));
        }
        by_class[label].push(id);
    }

    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (peer, classes) in peer_classes.iter().enumerate() {
        for &c in classes {
            holders[c].push(peer);
        }
    }

    let mut peers: Vec<Vec<ClassShard>> = vec![Vec::new(); n_peers];
    for (class, ids) in by_class.iter_mut().enumerate() {
        let holding = &holders[class];
        if holding.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        ids.shuffle(&mut rng);
        let shard_size = cfg.samples_per_class.unwrap_or(ids.len() / holding.len());
        if shard_size == 0 || shard_size * holding.len() > ids.len() {
            return Err(PartitionError::Config(format!(
                "class {class} has {} samples; {} holders cannot each get a shard of {shard_size}",
                ids.len(),
                holding.len()
            )));
        }
        for (shard_index, &peer) in holding.iter().enumerate() {
            let start = shard_index * shard_size;
            peers[peer].push(ClassShard {
                class,
                shard_index,
                samples: ids[start..start + shard_size].to_vec(),
            });
        }
    }
    for shards in &mut peers {
        shards.sort_by_key(|s| s.class);
    }

    Ok(ShardAssignment {
        shards_per_peer: k,
        class_coverage: cfg.class_coverage,
        peers,
    })
}

/// A peer's private data: a training stream and a held-out subset that is only
/// ever used to evaluate models.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerData {
    pub train_pool: Vec<Sample>,
    pub integration_set: Vec<Sample>,
    pub familiar_classes: BTreeSet<usize>,
}

/// Moves up to `kappa` random samples of each class into the integration set.
/// A class with fewer than `kappa` samples gives all but one of them and is
/// not familiar.
pub fn split_peer_data(samples: &[Sample], kappa: usize, seed: u64) -> Result<PeerData, PartitionError> {
    if kappa == 0 {
        return Err(PartitionError::Config("kappa must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(PartitionError::EmptyShard);
    }
    let mut by_class: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    for &s in samples {
        by_class.entry(s.label).or_default().push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = PeerData {
        train_pool: Vec::new(),
        integration_set: Vec::new(),
        familiar_classes: BTreeSet::new(),
    };
    for (class, mut group) in by_class {
        group.shuffle(&mut rng);
        let take = if group.len() >= kappa {
            data.familiar_classes.insert(class);
            kappa
        } else {
            group.len() - 1
        };
        data.integration_set.extend_from_slice(&group[..take]);
        data.train_pool.extend_from_slice(&group[take..]);
    }
    Ok(data)
}
