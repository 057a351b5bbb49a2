//! Scenario and matrix execution with on-disk outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bristle_core::sim::{MetricsRecord, Simulation, Summary};
use bristle_core::OutputLayer;
use serde::Serialize;
use toml::Value;

use crate::config::{ConfigError, ExperimentConfig, MatrixSpec};
use crate::data::{DataCache, LoadedData};
use crate::plot::{accuracy_chart, Series};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.resolved.toml";
pub const CURVE_FILE: &str = "accuracy_curve.svg";
pub const COMPARISON_FILE: &str = "comparison.csv";

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    #[serde(flatten)]
    pub summary: Summary,
    pub seed: u64,
    pub extractor: String,
    pub declared_extractor_params: usize,
    /// Bytes a peer would send if the frozen layers travelled too.
    pub full_model_bytes: usize,
    pub payload_fraction: f64,
}

/// Serialized size of the output layer plus the frozen layers, all as `f32`.
pub fn full_model_bytes(classes: usize, features: usize, declared_params: usize) -> usize {
    OutputLayer::serialized_len(classes, features) + 4 * declared_params
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in records {
        writer.serialize(r)?;
    }
    if records.is_empty() {
        writer.write_record(["iteration", "peer_id", "accuracy", "bytes_sent_cum"])?;
    }
    writer.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Runs one scenario and writes its metrics, summary, resolved config and plot into `out`.
pub fn run_scenario(config: &ExperimentConfig, data: &LoadedData, out: &Path) -> Result<ScenarioReport> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join(CONFIG_FILE), config.to_toml())?;

    let sim = Simulation::new(config.sim.clone(), data.train.clone(), data.test.clone())?;
    let classes = sim.classes();
    let features = data.train.feature_dim();
    let output = sim.run()?;

    write_metrics_csv(&out.join(METRICS_FILE), &output.records)?;
    let full = full_model_bytes(classes, features, data.declared_params);
    let report = ScenarioReport {
        seed: config.sim.seed,
        extractor: data.extractor_kind.to_string(),
        declared_extractor_params: data.declared_params,
        full_model_bytes: full,
        payload_fraction: output.summary.payload_bytes as f64 / full as f64,
        summary: output.summary,
    };
    write(&out.join(SUMMARY_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    let title = format!("{} under {}", report.summary.rule, report.summary.attack);
    let series = [Series {
        name: report.summary.rule.clone(),
        points: report.summary.accuracy_curve.clone(),
    }];
    write(&out.join(CURVE_FILE), accuracy_chart(&title, &series))?;
    Ok(report)
}

#[derive(Debug)]
pub struct CellOutcome {
    pub name: String,
    pub assignments: Vec<(String, Value)>,
    pub result: Result<ScenarioReport, String>,
}

#[derive(Debug)]
pub struct MatrixReport {
    pub cells: Vec<CellOutcome>,
}

impl MatrixReport {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.result.is_err()).count()
    }
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Runs every cell into its own sub-directory. A failing cell is recorded and
/// the remaining cells still run.
pub fn run_matrix(spec: &MatrixSpec, cache: &mut DataCache, out: &Path) -> Result<MatrixReport> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let cells = spec.cells().map_err(anyhow::Error::from)?;
    let total = cells.len();
    let mut outcomes = Vec::with_capacity(total);
    for (i, cell) in cells.into_iter().enumerate() {
        eprintln!("[{}/{}] {}", i + 1, total, cell.name);
        let dir = out.join(&cell.name);
        let result = cache
            .load(&cell.config)
            .and_then(|data| run_scenario(&cell.config, &data, &dir))
            .map_err(|e| format!("{e:#}"));
        match &result {
            Ok(r) => eprintln!("    final accuracy {:.4}", r.summary.final_accuracy),
            Err(e) => eprintln!("    failed: {e}"),
        }
        outcomes.push(CellOutcome {
            name: cell.name,
            assignments: cell.assignments,
            result,
        });
    }
    let report = MatrixReport { cells: outcomes };
    write_comparison(spec, &report, &out.join(COMPARISON_FILE))?;
    write_group_plots(&report, out)?;
    Ok(report)
}

/// One row per (cell, sampling point) with the cell's axis values.
fn write_comparison(spec: &MatrixSpec, report: &MatrixReport, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec!["cell".to_string()];
    header.extend(spec.axes.iter().map(|(k, _)| k.clone()));
    header.extend(["iteration", "mean_accuracy"].map(String::from));
    writer.write_record(&header)?;
    for cell in &report.cells {
        let Ok(r) = &cell.result else { continue };
        for (it, acc) in &r.summary.accuracy_curve {
            let mut row = vec![cell.name.clone()];
            row.extend(cell.assignments.iter().map(|(_, v)| value_text(v)));
            row.push(it.to_string());
            row.push(acc.to_string());
            writer.write_record(&row)?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// One chart per combination of non-rule axes, with one series per rule.
fn write_group_plots(report: &MatrixReport, out: &Path) -> Result<()> {
    let mut groups: BTreeMap<String, Vec<Series>> = BTreeMap::new();
    for cell in &report.cells {
        let Ok(r) = &cell.result else { continue };
        let rest: Vec<(String, Value)> = cell.assignments.iter().filter(|(k, _)| k != "rule").cloned().collect();
        groups.entry(crate::config::cell_name(&rest)).or_default().push(Series {
            name: r.summary.rule.clone(),
            points: r.summary.accuracy_curve.clone(),
        });
    }
    for (group, series) in groups {
        write(
            &out.join(format!("plot_{group}.svg")),
            accuracy_chart(&group.replace('_', " "), &series),
        )?;
    }
    Ok(())
}

const ALL_RULES: &str = r#"["fedavg", "median", "krum", "bridge", "mozi", "bristle"]"#;
const ALL_ATTACKS: &str = r#"["label-flip", "additive-noise", "krum-attack", "trimmed-mean-attack"]"#;

/// Named matrix documents reproducing the published experiment set.
pub fn paper_presets() -> Vec<(&'static str, String)> {
    vec![
        (
            "iid-attacks",
            format!(
                "data.class_coverage = 1.0\nbyzantine_fraction = 0.5\n\
                 matrix.attack.kind = [\"none\", \"label-flip\", \"additive-noise\", \"krum-attack\", \"trimmed-mean-attack\"]\n\
                 matrix.rule = {ALL_RULES}\n"
            ),
        ),
        (
            "coverage-no-attack",
            format!("attack.kind = \"none\"\nmatrix.data.class_coverage = [1.0, 0.4]\nmatrix.rule = {ALL_RULES}\n"),
        ),
        (
            "noniid-attacks",
            format!(
                "data.class_coverage = 0.4\nbyzantine_fraction = 0.5\n\
                 matrix.attack.kind = {ALL_ATTACKS}\nmatrix.rule = {ALL_RULES}\n"
            ),
        ),
        (
            "attacker-fraction",
            format!(
                "attack.kind = \"label-flip\"\ndata.class_coverage = 0.4\n\
                 matrix.byzantine_fraction = [0.1, 0.3, 0.5, 0.7]\nmatrix.rule = {ALL_RULES}\n"
            ),
        ),
        (
            "coverage-label-flip",
            format!(
                "attack.kind = \"label-flip\"\nbyzantine_fraction = 0.3\n\
                 matrix.data.class_coverage = [0.2, 0.6]\nmatrix.rule = {ALL_RULES}\n"
            ),
        ),
        (
            "sparse-network",
            format!(
                "peers = 200\nbyzantine_fraction = 0.5\nattackers_connect_all = true\n\
                 attack.kind = \"label-flip\"\ndata.class_coverage = 0.4\n\
                 matrix.connection_ratio = [0.02, 0.05]\nmatrix.rule = {ALL_RULES}\n"
            ),
        ),
    ]
}

/// Parses a preset, points it at `mnist_dir` and optionally overrides the seed.
pub fn preset_spec(text: &str, mnist_dir: &Path, seed: Option<u64>) -> Result<MatrixSpec, ConfigError> {
    let mut spec = MatrixSpec::parse(text)?;
    spec.base.data.mnist_dir = mnist_dir.to_path_buf();
    if let Some(seed) = seed {
        spec.base.sim.seed = seed;
    }
    Ok(spec)
}

/// Runs the selected presets (all when `only` is empty) into `out/<preset>`.
pub fn run_paper_matrix(
    mnist_dir: &Path,
    only: &[String],
    out: &Path,
    seed: Option<u64>,
) -> Result<Vec<(String, MatrixReport)>> {
    crate::data::check_mnist_dir(mnist_dir)?;
    let presets = paper_presets();
    for name in only {
        if !presets.iter().any(|(n, _)| n == name) {
            let known: Vec<&str> = presets.iter().map(|(n, _)| *n).collect();
            anyhow::bail!("unknown preset `{name}` (known: {})", known.join(", "));
        }
    }
    let mut cache = DataCache::new();
    let mut reports = Vec::new();
    for (name, text) in presets {
        if !only.is_empty() && !only.iter().any(|o| o == name) {
            continue;
        }
        eprintln!("== {name}");
        let spec = preset_spec(&text, mnist_dir, seed)?;
        let dir: PathBuf = out.join(name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write(&dir.join("matrix.toml"), &text)?;
        reports.push((name.to_string(), run_matrix(&spec, &mut cache, &dir)?));
    }
    Ok(reports)
}
