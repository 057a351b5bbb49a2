//! Decentralized learning of an output layer on top of a frozen feature
//! extractor, with pluggable aggregation rules, Byzantine attackers and a
//! deterministic round-based simulator.

pub mod adversary;
pub mod features;
pub mod gar;
pub mod model;
pub mod partition;
pub mod sim;

pub use gar::{build_rule, AggregationError, AggregationRule, RuleKind, RuleParams};
pub use model::{AdamConfig, ModelError, OptimizerState, OutputLayer};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for one independent stream derived from a master seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
