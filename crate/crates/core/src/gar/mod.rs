//! Gradient aggregation rules.
//!
//! Every rule combines a peer's own output layer with the layers it received
//! this round. Rules that judge models by their performance also get the
//! peer's held-out evaluation samples.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{ModelError, OutputLayer};

pub mod baselines;
pub mod bristle;

pub use baselines::{Bridge, FedAvg, Krum, Median, Mozi};
pub use bristle::{Bristle, DbpConfig, PbiConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// A model received from another peer.
#[derive(Debug, Clone)]
pub struct Received {
    pub sender: usize,
    pub model: Arc<OutputLayer>,
}

/// Held-out samples a peer evaluates incoming models on.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub familiar_classes: Vec<usize>,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

pub struct AggregationInput<'a> {
    pub own_id: usize,
    pub own: &'a OutputLayer,
    pub received: &'a [Received],
    pub eval: &'a EvalSet,
    pub rng: &'a mut ChaCha8Rng,
}

impl AggregationInput<'_> {
    pub(crate) fn check_shapes(&self) -> Result<(), AggregationError> {
        for r in self.received {
            self.own.check_same_shape(&r.model)?;
        }
        Ok(())
    }

    /// Own model followed by received models, tagged with their peer ids.
    pub(crate) fn all_models(&self) -> Vec<(usize, &OutputLayer)> {
        std::iter::once((self.own_id, self.own))
            .chain(self.received.iter().map(|r| (r.sender, r.model.as_ref())))
            .collect()
    }
}

pub trait AggregationRule: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn hyperparameters(&self) -> Vec<(&'static str, f64)> {
        Vec::new()
    }

    fn aggregate(&self, input: AggregationInput<'_>) -> Result<OutputLayer, AggregationError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RuleKind {
    FedAvg,
    Median,
    Krum,
    Bridge,
    Mozi,
    Bristle,
}

impl RuleKind {
    pub const ALL: [RuleKind; 6] = [
        RuleKind::FedAvg,
        RuleKind::Median,
        RuleKind::Krum,
        RuleKind::Bridge,
        RuleKind::Mozi,
        RuleKind::Bristle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RuleKind::FedAvg => "fedavg",
            RuleKind::Median => "median",
            RuleKind::Krum => "krum",
            RuleKind::Bridge => "bridge",
            RuleKind::Mozi => "mozi",
            RuleKind::Bristle => "bristle",
        }
    }
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RuleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RuleKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown rule `{s}` (expected fedavg|median|krum|bridge|mozi|bristle)"))
    }
}

/// Hyperparameters for every rule; only the ones of the selected rule are used.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleParams {
    pub krum_attackers: usize,
    pub bridge_trim: usize,
    pub mozi_benign_ratio: f64,
    pub mozi_batch: usize,
    pub dbp: DbpConfig,
    pub pbi: PbiConfig,
}

impl Default for RuleParams {
    fn default() -> Self {
        Self {
            krum_attackers: 4,
            bridge_trim: 4,
            mozi_benign_ratio: 0.5,
            mozi_batch: 25,
            dbp: DbpConfig::default(),
            pbi: PbiConfig::default(),
        }
    }
}

pub fn build_rule(kind: RuleKind, params: &RuleParams) -> Arc<dyn AggregationRule> {
    match kind {
        RuleKind::FedAvg => Arc::new(FedAvg),
        RuleKind::Median => Arc::new(Median),
        RuleKind::Krum => Arc::new(Krum {
            assumed_attackers: params.krum_attackers,
        }),
        RuleKind::Bridge => Arc::new(Bridge {
            trim: params.bridge_trim,
        }),
        RuleKind::Mozi => Arc::new(Mozi {
            benign_ratio: params.mozi_benign_ratio,
            batch_cap: params.mozi_batch,
        }),
        RuleKind::Bristle => Arc::new(Bristle {
            dbp: params.dbp.clone(),
            pbi: params.pbi.clone(),
        }),
    }
}
