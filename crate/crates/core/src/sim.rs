//! Synchronous round-based simulation of decentralized learning.
//!
//! Each round every honest peer aggregates what it received in the previous
//! round into its model, trains one mini-batch and sends the result to its
//! out-neighbours. All models entering an aggregation are thus one round old.
//! Byzantine peers either follow the same loop on flipped labels or send a
//! crafted model. Messages sent in round `t` are read in round `t + 1`.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::adversary::{
    additive_noise_model, krum_attack_model, shift_label, trimmed_mean_attack_model, AttackKind, AttackParams,
};
use crate::features::FeatureTable;
use crate::gar::baselines::mean;
use crate::gar::{build_rule, AggregationError, AggregationInput, AggregationRule, EvalSet, Received, RuleKind, RuleParams};
use crate::model::{accuracy, AdamConfig, ModelError, OptimizerState, OutputLayer};
use crate::partition::{assign_shards, split_peer_data, PartitionConfig, PartitionError, Sample};
use crate::stream_rng;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Independent random streams of one peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Training,
    Aggregation,
    Network,
    Attack,
    Split,
}

const TOPOLOGY_TAG: u64 = 1 << 62;
const PARTITION_TAG: u64 = (1 << 62) + 1;

/// Sub-seed for one consumer of randomness, derived from the master seed.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    stream_rng(master, tag).next_u64()
}

pub fn peer_rng(master: u64, peer: usize, purpose: Purpose) -> ChaCha8Rng {
    stream_rng(master, (peer as u64) * 8 + purpose as u64)
}

/// Directed communication graph; `out[p]` lists the peers `p` sends to.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub out: Vec<Vec<usize>>,
}

impl Topology {
    pub fn peers(&self) -> usize {
        self.out.len()
    }

    pub fn edge_count(&self) -> usize {
        self.out.iter().map(Vec::len).sum()
    }

    /// Whether every honest peer can reach every other through honest peers only.
    pub fn honest_strongly_connected(&self, attacker: &[bool]) -> bool {
        let honest: Vec<usize> = (0..self.peers()).filter(|&p| !attacker[p]).collect();
        let Some(&start) = honest.first() else {
            return true;
        };
        let mut reverse = vec![Vec::new(); self.peers()];
        for (p, outs) in self.out.iter().enumerate() {
            for &q in outs {
                reverse[q].push(p);
            }
        }
        let reach = |adj: &[Vec<usize>]| {
            let mut seen = vec![false; adj.len()];
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(p) = stack.pop() {
                for &q in &adj[p] {
                    if !attacker[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
            honest.iter().all(|&p| seen[p])
        };
        reach(&self.out) && reach(&reverse)
    }
}

/// Each peer sends to `ceil(ratio * (candidates))` random other peers. With
/// `attackers_connect_all`, honest peers only pick honest neighbours and every
/// attacker sends to every honest peer.
pub fn build_topology(
    connection_ratio: f64,
    attacker: &[bool],
    attackers_connect_all: bool,
    seed: u64,
) -> Result<Topology, SimError> {
    let n = attacker.len();
    if !(connection_ratio > 0.0 && connection_ratio <= 1.0) {
        return Err(SimError::Config(format!(
            "connection_ratio = {connection_ratio} outside (0, 1]"
        )));
    }
    let honest: Vec<usize> = (0..n).filter(|&p| !attacker[p]).collect();
    let mut out = Vec::with_capacity(n);
    for p in 0..n {
        let mut rng = stream_rng(seed, p as u64);
        if attackers_connect_all && attacker[p] {
            out.push(honest.clone());
            continue;
        }
        let candidates: Vec<usize> = if attackers_connect_all {
            honest.iter().copied().filter(|&q| q != p).collect()
        } else {
            (0..n).filter(|&q| q != p).collect()
        };
        let k = (connection_ratio * candidates.len() as f64 - 1e-9).ceil().max(0.0) as usize;
        if k == 0 {
            return Err(SimError::Config(format!(
                "connection_ratio = {connection_ratio} gives peer {p} no neighbours"
            )));
        }
        let mut picked: Vec<usize> = sample(&mut rng, candidates.len(), k)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        picked.sort_unstable();
        out.push(picked);
    }
    Ok(Topology { out })
}

/// Ids of `count` attackers spread evenly over `n` peers.
pub fn attacker_ids(n: usize, count: usize) -> Vec<usize> {
    (0..count).map(|j| j * n / count).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Total number of peers, attackers included.
    pub peers: usize,
    pub connection_ratio: f64,
    pub byzantine_fraction: f64,
    pub attackers_connect_all: bool,
    pub drop_probability: f64,
    pub rule: RuleKind,
    pub rule_params: RuleParams,
    pub attack: AttackKind,
    pub attack_params: AttackParams,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub iterations: usize,
    pub eval_every: usize,
    pub partition: PartitionConfig,
    pub seed: u64,
    /// Average accuracy over attackers too instead of honest peers only.
    pub average_all_peers: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            peers: 10,
            connection_ratio: 1.0,
            byzantine_fraction: 0.5,
            attackers_connect_all: false,
            drop_probability: 0.0,
            rule: RuleKind::Bristle,
            rule_params: RuleParams::default(),
            attack: AttackKind::LabelFlip,
            attack_params: AttackParams::default(),
            batch_size: 5,
            optimizer: AdamConfig::default(),
            iterations: 300,
            eval_every: 10,
            partition: PartitionConfig::default(),
            seed: 42,
            average_all_peers: false,
        }
    }
}

impl SimConfig {
    /// Number of Byzantine peers; zero when no attack is configured.
    pub fn attacker_count(&self) -> usize {
        if self.attack == AttackKind::None {
            0
        } else {
            (self.byzantine_fraction * self.peers as f64).round() as usize
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |msg: String| Err(SimError::Config(msg));
        if self.peers < 2 {
            return fail(format!("peers = {} but at least 2 are needed", self.peers));
        }
        if !(0.0..1.0).contains(&self.byzantine_fraction) {
            return fail(format!("byzantine_fraction = {} outside [0, 1)", self.byzantine_fraction));
        }
        if self.attacker_count() >= self.peers {
            return fail("no honest peers left".into());
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return fail(format!("drop_probability = {} outside [0, 1]", self.drop_probability));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1".into());
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) || !(o.l2 >= 0.0 && o.l2.is_finite()) {
            return fail("learning rate must be positive and L2 nonnegative".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0) {
            return fail("Adam betas must lie in [0, 1) and epsilon be positive".into());
        }
        let rp = &self.rule_params;
        if !(rp.mozi_benign_ratio > 0.0 && rp.mozi_benign_ratio <= 1.0) || rp.mozi_batch == 0 {
            return fail("mozi.rho must lie in (0, 1] and mozi.batch be positive".into());
        }
        rp.dbp.validate()?;
        rp.pbi.validate()?;
        self.attack_params.validate()?;
        Ok(())
    }
}

/// Accuracy of one peer on the global test set after an iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub peer_id: usize,
    pub accuracy: f64,
    pub bytes_sent_cum: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MessageCounts {
    pub sent: u64,
    pub dropped: u64,
    pub delivered: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub rule: String,
    pub attack: String,
    pub peers: usize,
    pub attackers: Vec<usize>,
    pub iterations: usize,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub iterations_to_70: Option<usize>,
    pub iterations_to_90: Option<usize>,
    pub total_bytes_sent: u64,
    pub payload_bytes: usize,
    pub messages: MessageCounts,
    pub honest_graph_connected: bool,
    /// Mean tracked-peer accuracy at each recorded iteration.
    pub accuracy_curve: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundStats {
    pub iteration: usize,
    pub messages: MessageCounts,
    /// Wall time spent inside aggregation rules, summed over peers.
    pub aggregation_time: Duration,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub records: Vec<MetricsRecord>,
    pub summary: Summary,
}

/// Cycles through a sample pool in shuffled order, reshuffling after each pass.
#[derive(Debug, Clone)]
pub struct MinibatchStream {
    order: Vec<usize>,
    cursor: usize,
}

impl MinibatchStream {
    pub fn new<R: Rng + ?Sized>(pool_size: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..pool_size).collect();
        order.shuffle(rng);
        Self { order, cursor: 0 }
    }

    /// Next `size` positions in the pool; empty for an empty pool.
    pub fn next_batch<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

#[derive(Debug)]
struct Peer {
    id: usize,
    attacker: bool,
    /// Trains and aggregates like an honest peer, possibly on remapped labels.
    follows_protocol: bool,
    model: OutputLayer,
    optimizer: OptimizerState,
    train_pool: Vec<Sample>,
    batches: MinibatchStream,
    eval: EvalSet,
    train_rng: ChaCha8Rng,
    agg_rng: ChaCha8Rng,
    net_rng: ChaCha8Rng,
    attack_rng: ChaCha8Rng,
    inbox: Vec<Received>,
    bytes_sent: u64,
}

impl Peer {
    fn local_round(&mut self, train: &FeatureTable, batch_size: usize, rule: &dyn AggregationRule) -> Result<Duration, SimError> {
        let inbox = std::mem::take(&mut self.inbox);
        if !self.follows_protocol {
            return Ok(Duration::ZERO);
        }
        let start = Instant::now();
        self.model = rule.aggregate(AggregationInput {
            own_id: self.id,
            own: &self.model,
            received: &inbox,
            eval: &self.eval,
            rng: &mut self.agg_rng,
        })?;
        let elapsed = start.elapsed();
        let positions = self.batches.next_batch(batch_size, &mut self.train_rng);
        if !positions.is_empty() {
            let ids: Vec<usize> = positions.iter().map(|&i| self.train_pool[i].id).collect();
            let labels: Vec<usize> = positions.iter().map(|&i| self.train_pool[i].label).collect();
            let x = train.gather(&ids);
            self.optimizer.apply(&mut self.model, x.view(), &labels)?;
        }
        Ok(elapsed)
    }
}

pub struct Simulation {
    config: SimConfig,
    train: Arc<FeatureTable>,
    test: Arc<FeatureTable>,
    classes: usize,
    rule: Arc<dyn AggregationRule>,
    topology: Topology,
    peers: Vec<Peer>,
    previous_honest_mean: OutputLayer,
    iteration: usize,
    messages: MessageCounts,
    records: Vec<MetricsRecord>,
    initial_accuracy: f64,
}

impl Simulation {
    pub fn new(config: SimConfig, train: Arc<FeatureTable>, test: Arc<FeatureTable>) -> Result<Self, SimError> {
        config.validate()?;
        if train.is_empty() || test.is_empty() {
            return Err(SimError::Config("training and test sets must be nonempty".into()));
        }
        if train.feature_dim() != test.feature_dim() {
            return Err(SimError::Config(format!(
                "train features have {} columns but test features {}",
                train.feature_dim(),
                test.feature_dim()
            )));
        }
        let classes = train.labels.iter().chain(&test.labels).max().map_or(0, |m| m + 1).max(2);
        let shift = config.attack_params.label_shift;
        if shift >= classes {
            return Err(SimError::Config(format!(
                "attack.label_shift = {shift} must be below the class count {classes}"
            )));
        }

        let n = config.peers;
        let mut attacker = vec![false; n];
        for id in attacker_ids(n, config.attacker_count()) {
            attacker[id] = true;
        }
        let topology = build_topology(
            config.connection_ratio,
            &attacker,
            config.attackers_connect_all,
            derive_seed(config.seed, TOPOLOGY_TAG),
        )?;
        let shards = assign_shards(
            &train.labels,
            classes,
            n,
            &config.partition,
            derive_seed(config.seed, PARTITION_TAG),
        )?;
        let kappa = config.rule_params.pbi.min_class_samples;
        let zero = OutputLayer::zeros(classes, train.feature_dim())?;

        let mut peers = Vec::with_capacity(n);
        for id in 0..n {
            let flips = attacker[id] && config.attack == AttackKind::LabelFlip;
            let mut samples = shards.peer_samples(id);
            if flips {
                for s in &mut samples {
                    s.label = shift_label(s.label, shift, classes);
                }
            }
            let split_seed = peer_rng(config.seed, id, Purpose::Split).next_u64();
            let data = split_peer_data(&samples, kappa, split_seed)?;
            let eval_ids: Vec<usize> = data.integration_set.iter().map(|s| s.id).collect();
            let eval = EvalSet {
                features: train.gather(&eval_ids),
                labels: data.integration_set.iter().map(|s| s.label).collect(),
                familiar_classes: data.familiar_classes.iter().copied().collect(),
            };
            let mut train_rng = peer_rng(config.seed, id, Purpose::Training);
            let batches = MinibatchStream::new(data.train_pool.len(), &mut train_rng);
            peers.push(Peer {
                id,
                attacker: attacker[id],
                follows_protocol: !(attacker[id] && config.attack.is_crafted()),
                model: zero.clone(),
                optimizer: OptimizerState::new(&zero, config.optimizer),
                train_pool: data.train_pool,
                batches,
                eval,
                train_rng,
                agg_rng: peer_rng(config.seed, id, Purpose::Aggregation),
                net_rng: peer_rng(config.seed, id, Purpose::Network),
                attack_rng: peer_rng(config.seed, id, Purpose::Attack),
                inbox: Vec::new(),
                bytes_sent: 0,
            });
        }

        let rule = build_rule(config.rule, &config.rule_params);
        let mut sim = Self {
            config,
            train,
            test,
            classes,
            rule,
            topology,
            peers,
            previous_honest_mean: zero,
            iteration: 0,
            messages: MessageCounts::default(),
            records: Vec::new(),
            initial_accuracy: 0.0,
        };
        let initial = sim.evaluate_tracked()?;
        sim.initial_accuracy = mean_of(initial.iter().map(|(_, a)| *a));
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn attackers(&self) -> Vec<usize> {
        self.peers.iter().filter(|p| p.attacker).map(|p| p.id).collect()
    }

    pub fn model(&self, peer: usize) -> &OutputLayer {
        &self.peers[peer].model
    }

    pub fn train_pool(&self, peer: usize) -> &[Sample] {
        &self.peers[peer].train_pool
    }

    pub fn eval_set(&self, peer: usize) -> &EvalSet {
        &self.peers[peer].eval
    }

    pub fn inbox_len(&self, peer: usize) -> usize {
        self.peers[peer].inbox.len()
    }

    pub fn payload_bytes(&self) -> usize {
        OutputLayer::serialized_len(self.classes, self.train.feature_dim())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    fn tracked(&self, peer: &Peer) -> bool {
        self.config.average_all_peers || !peer.attacker
    }

    fn evaluate_tracked(&self) -> Result<Vec<(usize, f64)>, SimError> {
        let test = &self.test;
        self.peers
            .par_iter()
            .filter(|p| self.tracked(p))
            .map(|p| Ok((p.id, accuracy(&p.model, test.features.view(), &test.labels)?)))
            .collect()
    }

    pub fn run_round(&mut self) -> Result<RoundStats, SimError> {
        let train = Arc::clone(&self.train);
        let rule = Arc::clone(&self.rule);
        let batch_size = self.config.batch_size;
        let times: Vec<Duration> = self
            .peers
            .par_iter_mut()
            .map(|p| p.local_round(&train, batch_size, rule.as_ref()))
            .collect::<Result<_, _>>()?;

        self.emit_crafted_models()?;

        let payload = self.payload_bytes() as u64;
        let drop = self.config.drop_probability;
        let mut round = MessageCounts::default();
        let mut outgoing: Vec<(usize, Arc<OutputLayer>)> = Vec::new();
        for p in 0..self.peers.len() {
            let model = Arc::new(self.peers[p].model.clone());
            let peer = &mut self.peers[p];
            for &q in &self.topology.out[p] {
                peer.bytes_sent += payload;
                round.sent += 1;
                let dropped = drop >= 1.0 || (drop > 0.0 && peer.net_rng.random_bool(drop));
                if dropped {
                    round.dropped += 1;
                } else {
                    round.delivered += 1;
                    outgoing.push((q, Arc::clone(&model)));
                }
            }
            for (q, m) in outgoing.drain(..) {
                self.peers[q].inbox.push(Received { sender: p, model: m });
            }
        }
        self.messages.sent += round.sent;
        self.messages.dropped += round.dropped;
        self.messages.delivered += round.delivered;

        self.iteration += 1;
        if self.iteration.is_multiple_of(self.config.eval_every) {
            for (peer_id, acc) in self.evaluate_tracked()? {
                self.records.push(MetricsRecord {
                    iteration: self.iteration,
                    peer_id,
                    accuracy: acc,
                    bytes_sent_cum: self.peers[peer_id].bytes_sent,
                });
            }
        }
        Ok(RoundStats {
            iteration: self.iteration,
            messages: round,
            aggregation_time: times.into_iter().sum(),
        })
    }

    fn emit_crafted_models(&mut self) -> Result<(), SimError> {
        let attack = self.config.attack;
        let honest_models: Vec<OutputLayer> = self
            .peers
            .iter()
            .filter(|p| !p.attacker)
            .map(|p| p.model.clone())
            .collect();
        let honest: Vec<&OutputLayer> = honest_models.iter().collect();
        let current_mean = mean(&honest)?;
        if attack.is_crafted() {
            let params = &self.config.attack_params;
            let attackers: Vec<usize> = self.attackers();
            let (classes, features) = (self.classes, self.train.feature_dim());
            let shared = match attack {
                AttackKind::KrumAttack => {
                    let rng = &mut self.peers[attackers[0]].attack_rng;
                    let outcome = krum_attack_model(
                        &honest,
                        &self.previous_honest_mean,
                        attackers.len(),
                        self.config.rule_params.krum_attackers,
                        params,
                        rng,
                    )?;
                    Some(outcome.model)
                }
                AttackKind::TrimmedMeanAttack => Some(trimmed_mean_attack_model(
                    &honest,
                    &self.previous_honest_mean,
                    params.trim_scale,
                    params.trim_epsilon,
                )?),
                _ => None,
            };
            for &a in &attackers {
                let peer = &mut self.peers[a];
                peer.model = match &shared {
                    Some(m) => m.clone(),
                    None => additive_noise_model(
                        classes,
                        features,
                        params.noise_mean,
                        params.noise_std,
                        &mut peer.attack_rng,
                    )?,
                };
            }
        }
        self.previous_honest_mean = current_mean;
        Ok(())
    }

    pub fn summary(&self) -> Summary {
        let mut curve: Vec<(usize, f64)> = Vec::new();
        for rec in &self.records {
            match curve.last_mut() {
                Some((it, _)) if *it == rec.iteration => {}
                _ => curve.push((rec.iteration, 0.0)),
            }
        }
        for point in &mut curve {
            point.1 = mean_of(
                self.records
                    .iter()
                    .filter(|r| r.iteration == point.0)
                    .map(|r| r.accuracy),
            );
        }
        let reach = |threshold: f64| curve.iter().find(|(_, a)| *a >= threshold).map(|(it, _)| *it);
        let attackers = self.attackers();
        let attacker_mask: Vec<bool> = self.peers.iter().map(|p| p.attacker).collect();
        Summary {
            rule: self.config.rule.to_string(),
            attack: if attackers.is_empty() {
                AttackKind::None.to_string()
            } else {
                self.config.attack.to_string()
            },
            peers: self.peers.len(),
            attackers,
            iterations: self.iteration,
            initial_accuracy: self.initial_accuracy,
            final_accuracy: curve.last().map_or(self.initial_accuracy, |(_, a)| *a),
            iterations_to_70: reach(0.7),
            iterations_to_90: reach(0.9),
            total_bytes_sent: self.peers.iter().map(|p| p.bytes_sent).sum(),
            payload_bytes: self.payload_bytes(),
            messages: self.messages.clone(),
            honest_graph_connected: self.topology.honest_strongly_connected(&attacker_mask),
            accuracy_curve: curve,
        }
    }

    /// Runs the remaining configured iterations.
    pub fn run(mut self) -> Result<SimOutput, SimError> {
        while self.iteration < self.config.iterations {
            self.run_round()?;
        }
        let summary = self.summary();
        Ok(SimOutput {
            records: self.records,
            summary,
        })
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}
