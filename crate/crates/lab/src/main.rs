use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bristle_core::features::write_feature_file;
use bristle_lab::config::{ExperimentConfig, MatrixSpec};
use bristle_lab::data::{self, DataCache};
use bristle_lab::runner;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bristle", version, about = "Decentralized federated learning simulator")]
struct Cli {
    /// Overrides the `seed` key of every scenario.
    #[arg(long, env = "BRISTLE_SEED", global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, env = "BRISTLE_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every cell of a matrix document.
    Matrix {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in experiment presets.
    PaperMatrix {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to these presets.
        #[arg(long = "only")]
        only: Vec<String>,
    },
    /// Extract features once and store them for `extractor.kind = "precomputed"`.
    Extract {
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> Result<ExitCode> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let seed = cli.seed;
    let override_seed = |c: &mut ExperimentConfig| {
        if let Some(s) = seed {
            c.sim.seed = s;
        }
    };
    match cli.command {
        Command::Run { config, out } => {
            let mut config = ExperimentConfig::parse(&read(&config)?)
                .with_context(|| format!("parsing {}", config.display()))?;
            override_seed(&mut config);
            print!("{}", config.to_toml());
            let loaded = data::load(&config)?;
            let report = runner::run_scenario(&config, &loaded, &out)?;
            println!(
                "\n# final accuracy {:.4}, outputs in {}",
                report.summary.final_accuracy,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Matrix { config, out } => {
            let mut spec = MatrixSpec::parse(&read(&config)?)
                .with_context(|| format!("parsing {}", config.display()))?;
            override_seed(&mut spec.base);
            print!("{}", spec.base.to_toml());
            let report = runner::run_matrix(&spec, &mut DataCache::new(), &out)?;
            finish(&[report])
        }
        Command::PaperMatrix { data, out, only } => {
            let reports = runner::run_paper_matrix(&data, &only, &out, seed)?;
            finish(&reports.into_iter().map(|(_, r)| r).collect::<Vec<_>>())
        }
        Command::Extract { config, out } => {
            let config = match config {
                Some(path) => ExperimentConfig::parse(&read(&path)?)?,
                None => ExperimentConfig::default(),
            };
            let loaded = data::load(&config)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_feature_file(&loaded.train, &out.join("train.brfe"), &out.join("train.labels"))?;
            write_feature_file(&loaded.test, &out.join("test.brfe"), &out.join("test.labels"))?;
            println!(
                "wrote {} train and {} test rows of {} features to {}",
                loaded.train.len(),
                loaded.test.len(),
                loaded.train.feature_dim(),
                out.display()
            );
            println!("declared extractor parameters: {}", loaded.declared_params);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn finish(reports: &[runner::MatrixReport]) -> Result<ExitCode> {
    let failed: Vec<&str> = reports
        .iter()
        .flat_map(|r| r.cells.iter().filter(|c| c.result.is_err()).map(|c| c.name.as_str()))
        .collect();
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("{} cell(s) failed: {}", failed.len(), failed.join(", "));
        Ok(ExitCode::FAILURE)
    }
}
