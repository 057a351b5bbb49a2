//! Experiment configuration documents.
//!
//! A document is TOML restricted to flat keys: `bristle.alpha = 0.3` and a
//! `[bristle]` section with `alpha = 0.3` mean the same thing. Every key has a
//! default, so an empty document is a complete configuration. Matrix
//! documents additionally list sweep axes as `matrix.<key> = [ ... ]`.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use bristle_core::adversary::AttackKind;
use bristle_core::sim::SimConfig;
use bristle_core::RuleKind;
use thiserror::Error;
use toml::Value;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("malformed config: {0}")]
    Syntax(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("`{key}` expects {expected}, got {found}")]
    Type {
        key: String,
        expected: &'static str,
        found: String,
    },
    #[error("`{key}` = {value} is outside the allowed range {allowed}")]
    Range {
        key: String,
        value: String,
        allowed: String,
    },
    #[error("`{key}` = {value}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("inconsistent config: {0}")]
    Inconsistent(String),
    #[error("matrix axis `{0}` must be a nonempty array")]
    BadAxis(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractorKind {
    RandomProjection,
    Precomputed,
}

impl ExtractorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExtractorKind::RandomProjection => "random-projection",
            ExtractorKind::Precomputed => "precomputed",
        }
    }
}

impl FromStr for ExtractorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random-projection" => Ok(ExtractorKind::RandomProjection),
            "precomputed" => Ok(ExtractorKind::Precomputed),
            _ => Err(format!("unknown extractor `{s}` (expected random-projection|precomputed)")),
        }
    }
}

/// Where features come from.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub mnist_dir: PathBuf,
    pub train_features: PathBuf,
    pub train_labels: PathBuf,
    pub test_features: PathBuf,
    pub test_labels: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mnist_dir: PathBuf::from("data/mnist"),
            train_features: PathBuf::from("data/features/train.brfe"),
            train_labels: PathBuf::from("data/features/train.labels"),
            test_features: PathBuf::from("data/features/test.brfe"),
            test_labels: PathBuf::from("data/features/test.labels"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    pub dim: usize,
    pub seed: u64,
    pub leaky_slope: f64,
    /// Frozen-layer parameter count for communication accounting; 0 uses the
    /// extractor's own count.
    pub declared_params: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::RandomProjection,
            dim: 800,
            seed: 7,
            leaky_slope: 0.01,
            declared_params: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub data: DataConfig,
    pub extractor: ExtractorConfig,
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "peers",
    "connection_ratio",
    "byzantine_fraction",
    "attackers_connect_all",
    "drop_probability",
    "rule",
    "average_all_peers",
    "attack.kind",
    "attack.noise_mean",
    "attack.noise_std",
    "attack.lambda_init",
    "attack.lambda_min",
    "attack.trim_scale",
    "attack.trim_epsilon",
    "attack.label_shift",
    "train.batch_size",
    "train.learning_rate",
    "train.l2",
    "train.iterations",
    "bristle.alpha",
    "bristle.beta",
    "bristle.phi",
    "bristle.kappa",
    "bristle.eta",
    "bristle.omega_fa1",
    "bristle.omega_fa2",
    "bristle.omega_fo1",
    "bristle.omega_fo2",
    "bristle.foreign_sum_skip_neg_inf",
    "krum.b",
    "bridge.b",
    "mozi.rho",
    "mozi.batch",
    "data.class_coverage",
    "data.samples_per_class",
    "data.random_classes",
    "data.mnist_dir",
    "data.train_features",
    "data.train_labels",
    "data.test_features",
    "data.test_labels",
    "extractor.kind",
    "extractor.dim",
    "extractor.seed",
    "extractor.leaky_slope",
    "extractor.declared_params",
    "metrics.eval_every",
];

#[derive(Clone, Copy)]
enum Edge {
    Open(f64),
    Closed(f64),
    Unbounded,
}

fn describe(lo: Edge, hi: Edge) -> String {
    let left = match lo {
        Edge::Open(v) => format!("({v}"),
        Edge::Closed(v) => format!("[{v}"),
        Edge::Unbounded => "(-inf".into(),
    };
    let right = match hi {
        Edge::Open(v) => format!("{v})"),
        Edge::Closed(v) => format!("{v}]"),
        Edge::Unbounded => "inf)".into(),
    };
    format!("{left}, {right}")
}

fn within(x: f64, lo: Edge, hi: Edge) -> bool {
    let above = match lo {
        Edge::Open(v) => x > v,
        Edge::Closed(v) => x >= v,
        Edge::Unbounded => x > f64::NEG_INFINITY,
    };
    let below = match hi {
        Edge::Open(v) => x < v,
        Edge::Closed(v) => x <= v,
        Edge::Unbounded => x < f64::INFINITY,
    };
    above && below
}

fn type_error(key: &str, expected: &'static str, value: &Value) -> ConfigError {
    ConfigError::Type {
        key: key.into(),
        expected,
        found: format!("{} `{value}`", value.type_str()),
    }
}

fn float(key: &str, value: &Value, lo: Edge, hi: Edge) -> Result<f64, ConfigError> {
    let x = match value {
        Value::Float(f) => *f,
        Value::Integer(i) => *i as f64,
        _ => return Err(type_error(key, "a number", value)),
    };
    if !within(x, lo, hi) {
        return Err(ConfigError::Range {
            key: key.into(),
            value: value.to_string(),
            allowed: describe(lo, hi),
        });
    }
    Ok(x)
}

fn integer(key: &str, value: &Value, min: i64) -> Result<i64, ConfigError> {
    let Value::Integer(i) = value else {
        return Err(type_error(key, "an integer", value));
    };
    if *i < min {
        return Err(ConfigError::Range {
            key: key.into(),
            value: i.to_string(),
            allowed: format!("[{min}, inf)"),
        });
    }
    Ok(*i)
}

fn count(key: &str, value: &Value, min: usize) -> Result<usize, ConfigError> {
    integer(key, value, min as i64).map(|i| i as usize)
}

fn boolean(key: &str, value: &Value) -> Result<bool, ConfigError> {
    value.as_bool().ok_or_else(|| type_error(key, "true or false", value))
}

fn string<'v>(key: &str, value: &'v Value) -> Result<&'v str, ConfigError> {
    value.as_str().ok_or_else(|| type_error(key, "a string", value))
}

fn parsed<T: FromStr<Err = String>>(key: &str, value: &Value) -> Result<T, ConfigError> {
    let s = string(key, value)?;
    s.parse().map_err(|reason| ConfigError::Value {
        key: key.into(),
        value: format!("\"{s}\""),
        reason,
    })
}

fn path(key: &str, value: &Value) -> Result<PathBuf, ConfigError> {
    string(key, value).map(PathBuf::from)
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

fn text(p: &std::path::Path) -> Value {
    Value::String(p.display().to_string())
}

impl ExperimentConfig {
    /// Sets one key, checking its type and range.
    pub fn set(&mut self, key: &str, value: &Value) -> Result<(), ConfigError> {
        use Edge::{Closed, Open, Unbounded};
        let s = &mut self.sim;
        let rp = &mut s.rule_params;
        let ap = &mut s.attack_params;
        match key {
            "seed" => s.seed = integer(key, value, 0)? as u64,
            "peers" => s.peers = count(key, value, 2)?,
            "connection_ratio" => s.connection_ratio = float(key, value, Open(0.0), Closed(1.0))?,
            "byzantine_fraction" => s.byzantine_fraction = float(key, value, Closed(0.0), Open(1.0))?,
            "attackers_connect_all" => s.attackers_connect_all = boolean(key, value)?,
            "drop_probability" => s.drop_probability = float(key, value, Closed(0.0), Closed(1.0))?,
            "rule" => s.rule = parsed::<RuleKind>(key, value)?,
            "average_all_peers" => s.average_all_peers = boolean(key, value)?,
            "attack.kind" => s.attack = parsed::<AttackKind>(key, value)?,
            "attack.noise_mean" => ap.noise_mean = float(key, value, Unbounded, Unbounded)?,
            "attack.noise_std" => ap.noise_std = float(key, value, Closed(0.0), Unbounded)?,
            "attack.lambda_init" => ap.lambda_init = float(key, value, Open(0.0), Unbounded)?,
            "attack.lambda_min" => ap.lambda_min = float(key, value, Open(0.0), Unbounded)?,
            "attack.trim_scale" => ap.trim_scale = float(key, value, Open(0.0), Unbounded)?,
            "attack.trim_epsilon" => ap.trim_epsilon = float(key, value, Closed(0.0), Unbounded)?,
            "attack.label_shift" => ap.label_shift = count(key, value, 0)?,
            "train.batch_size" => s.batch_size = count(key, value, 1)?,
            "train.learning_rate" => s.optimizer.learning_rate = float(key, value, Open(0.0), Unbounded)?,
            "train.l2" => s.optimizer.l2 = float(key, value, Closed(0.0), Unbounded)?,
            "train.iterations" => s.iterations = count(key, value, 0)?,
            "bristle.alpha" => rp.dbp.exploration = float(key, value, Closed(0.0), Closed(1.0))?,
            "bristle.beta" => rp.dbp.max_candidates = count(key, value, 1)?,
            "bristle.phi" => rp.pbi.top_classes = count(key, value, 1)?,
            "bristle.kappa" => rp.pbi.min_class_samples = count(key, value, 1)?,
            "bristle.eta" => rp.pbi.discrepancy_boost = float(key, value, Open(0.0), Unbounded)?,
            "bristle.omega_fa1" => rp.pbi.familiar_scale = float(key, value, Open(0.0), Unbounded)?,
            "bristle.omega_fa2" => rp.pbi.familiar_offset = float(key, value, Closed(0.0), Unbounded)?,
            "bristle.omega_fo1" => rp.pbi.foreign_scale = float(key, value, Open(0.0), Unbounded)?,
            "bristle.omega_fo2" => rp.pbi.foreign_offset = float(key, value, Closed(0.0), Unbounded)?,
            "bristle.foreign_sum_skip_neg_inf" => rp.pbi.foreign_sum_skip_neg_inf = boolean(key, value)?,
            "krum.b" => rp.krum_attackers = count(key, value, 0)?,
            "bridge.b" => rp.bridge_trim = count(key, value, 0)?,
            "mozi.rho" => rp.mozi_benign_ratio = float(key, value, Open(0.0), Closed(1.0))?,
            "mozi.batch" => rp.mozi_batch = count(key, value, 1)?,
            "data.class_coverage" => s.partition.class_coverage = float(key, value, Open(0.0), Closed(1.0))?,
            "data.samples_per_class" => {
                let n = count(key, value, 0)?;
                s.partition.samples_per_class = (n > 0).then_some(n);
            }
            "data.random_classes" => s.partition.random_classes = boolean(key, value)?,
            "data.mnist_dir" => self.data.mnist_dir = path(key, value)?,
            "data.train_features" => self.data.train_features = path(key, value)?,
            "data.train_labels" => self.data.train_labels = path(key, value)?,
            "data.test_features" => self.data.test_features = path(key, value)?,
            "data.test_labels" => self.data.test_labels = path(key, value)?,
            "extractor.kind" => self.extractor.kind = parsed::<ExtractorKind>(key, value)?,
            "extractor.dim" => self.extractor.dim = count(key, value, 1)?,
            "extractor.seed" => self.extractor.seed = integer(key, value, 0)? as u64,
            "extractor.leaky_slope" => self.extractor.leaky_slope = float(key, value, Closed(0.0), Open(1.0))?,
            "extractor.declared_params" => self.extractor.declared_params = count(key, value, 0)?,
            "metrics.eval_every" => s.eval_every = count(key, value, 1)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Current value of a key.
    pub fn get(&self, key: &str) -> Option<Value> {
        let s = &self.sim;
        let rp = &s.rule_params;
        let ap = &s.attack_params;
        Some(match key {
            "seed" => Value::Integer(s.seed as i64),
            "peers" => int(s.peers),
            "connection_ratio" => Value::Float(s.connection_ratio),
            "byzantine_fraction" => Value::Float(s.byzantine_fraction),
            "attackers_connect_all" => Value::Boolean(s.attackers_connect_all),
            "drop_probability" => Value::Float(s.drop_probability),
            "rule" => Value::String(s.rule.to_string()),
            "average_all_peers" => Value::Boolean(s.average_all_peers),
            "attack.kind" => Value::String(s.attack.to_string()),
            "attack.noise_mean" => Value::Float(ap.noise_mean),
            "attack.noise_std" => Value::Float(ap.noise_std),
            "attack.lambda_init" => Value::Float(ap.lambda_init),
            "attack.lambda_min" => Value::Float(ap.lambda_min),
            "attack.trim_scale" => Value::Float(ap.trim_scale),
            "attack.trim_epsilon" => Value::Float(ap.trim_epsilon),
            "attack.label_shift" => int(ap.label_shift),
            "train.batch_size" => int(s.batch_size),
            "train.learning_rate" => Value::Float(s.optimizer.learning_rate),
            "train.l2" => Value::Float(s.optimizer.l2),
            "train.iterations" => int(s.iterations),
            "bristle.alpha" => Value::Float(rp.dbp.exploration),
            "bristle.beta" => int(rp.dbp.max_candidates),
            "bristle.phi" => int(rp.pbi.top_classes),
            "bristle.kappa" => int(rp.pbi.min_class_samples),
            "bristle.eta" => Value::Float(rp.pbi.discrepancy_boost),
            "bristle.omega_fa1" => Value::Float(rp.pbi.familiar_scale),
            "bristle.omega_fa2" => Value::Float(rp.pbi.familiar_offset),
            "bristle.omega_fo1" => Value::Float(rp.pbi.foreign_scale),
            "bristle.omega_fo2" => Value::Float(rp.pbi.foreign_offset),
            "bristle.foreign_sum_skip_neg_inf" => Value::Boolean(rp.pbi.foreign_sum_skip_neg_inf),
            "krum.b" => int(rp.krum_attackers),
            "bridge.b" => int(rp.bridge_trim),
            "mozi.rho" => Value::Float(rp.mozi_benign_ratio),
            "mozi.batch" => int(rp.mozi_batch),
            "data.class_coverage" => Value::Float(s.partition.class_coverage),
            "data.samples_per_class" => int(s.partition.samples_per_class.unwrap_or(0)),
            "data.random_classes" => Value::Boolean(s.partition.random_classes),
            "data.mnist_dir" => text(&self.data.mnist_dir),
            "data.train_features" => text(&self.data.train_features),
            "data.train_labels" => text(&self.data.train_labels),
            "data.test_features" => text(&self.data.test_features),
            "data.test_labels" => text(&self.data.test_labels),
            "extractor.kind" => Value::String(self.extractor.kind.as_str().into()),
            "extractor.dim" => int(self.extractor.dim),
            "extractor.seed" => Value::Integer(self.extractor.seed as i64),
            "extractor.leaky_slope" => Value::Float(self.extractor.leaky_slope),
            "extractor.declared_params" => int(self.extractor.declared_params),
            "metrics.eval_every" => int(s.eval_every),
            _ => return None,
        })
    }

    /// Parses a scenario document; `matrix.*` keys are rejected.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let entries = flatten_document(text)?;
        if let Some((key, _)) = entries.iter().find(|(k, _)| k.starts_with("matrix.")) {
            return Err(ConfigError::UnknownKey(key.clone()));
        }
        Self::from_entries(&entries)
    }

    fn from_entries(entries: &[(String, Value)]) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        for (key, value) in entries {
            config.set(key, value)?;
        }
        config.check()?;
        Ok(config)
    }

    /// Cross-field checks that single keys cannot express.
    pub fn check(&self) -> Result<(), ConfigError> {
        self.sim
            .validate()
            .map_err(|e| ConfigError::Inconsistent(e.to_string()))
    }

    /// Fully resolved document; parsing it yields an identical config.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let (sec, name) = key.split_once('.').unwrap_or(("", key));
            if sec != section {
                let _ = write!(out, "\n[{sec}]\n");
                section = sec;
            }
            let value = self.get(key).expect("every listed key is readable");
            let _ = writeln!(out, "{name} = {value}");
        }
        out
    }
}

/// Flattens a TOML document into dotted keys; arrays stay values.
pub fn flatten_document(text: &str) -> Result<Vec<(String, Value)>, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    let mut out = Vec::new();
    flatten_into("", &table, &mut out);
    Ok(out)
}

fn flatten_into(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(inner) => flatten_into(&key, inner, out),
            _ => out.push((key, v.clone())),
        }
    }
}

/// A base config plus sweep axes; cells are the cartesian product.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSpec {
    pub base: ExperimentConfig,
    pub axes: Vec<(String, Vec<Value>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixCell {
    pub name: String,
    pub assignments: Vec<(String, Value)>,
    pub config: ExperimentConfig,
}

impl MatrixSpec {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let entries = flatten_document(text)?;
        let (axes, plain): (Vec<_>, Vec<_>) = entries.into_iter().partition(|(k, _)| k.starts_with("matrix."));
        let mut base = ExperimentConfig::default();
        for (key, value) in &plain {
            base.set(key, value)?;
        }
        let mut parsed_axes = Vec::new();
        for (key, value) in axes {
            let key = key["matrix.".len()..].to_string();
            let values = match value {
                Value::Array(items) if !items.is_empty() => items,
                _ => return Err(ConfigError::BadAxis(key)),
            };
            for v in &values {
                base.clone().set(&key, v)?;
            }
            parsed_axes.push((key, values));
        }
        Ok(Self { base, axes: parsed_axes })
    }

    pub fn cell_count(&self) -> usize {
        self.axes.iter().map(|(_, v)| v.len()).product()
    }

    /// All cells in row-major order over the axes as listed.
    pub fn cells(&self) -> Result<Vec<MatrixCell>, ConfigError> {
        let mut cells = Vec::with_capacity(self.cell_count());
        let mut index = vec![0usize; self.axes.len()];
        loop {
            let assignments: Vec<(String, Value)> = self
                .axes
                .iter()
                .zip(&index)
                .map(|((k, vals), &i)| (k.clone(), vals[i].clone()))
                .collect();
            let mut config = self.base.clone();
            for (k, v) in &assignments {
                config.set(k, v)?;
            }
            config.check()?;
            cells.push(MatrixCell {
                name: cell_name(&assignments),
                assignments,
                config,
            });
            let mut axis = self.axes.len();
            loop {
                if axis == 0 {
                    return Ok(cells);
                }
                axis -= 1;
                index[axis] += 1;
                if index[axis] < self.axes[axis].1.len() {
                    break;
                }
                index[axis] = 0;
            }
        }
    }
}

/// Directory-safe label such as `rule-krum_attack.kind-none`.
pub fn cell_name(assignments: &[(String, Value)]) -> String {
    if assignments.is_empty() {
        return "base".into();
    }
    assignments
        .iter()
        .map(|(k, v)| {
            let v = match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            let v: String = v
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
                .collect();
            format!("{k}-{v}")
        })
        .collect::<Vec<_>>()
        .join("_")
}
