//! `dacouple`: gradient certification, training, ablation sweeps and the
//! camera-gap table from the command line.
//!
//! Exit codes: 0 success, 1 check failure or runtime error, 2 config error.

mod ablate;
mod config;
mod run;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dacouple::gradcheck::certify;
use dacouple::synthetic::make_benchmark;
use dacouple::training::{Mode, TrainConfig, TrainData, TrainState};

use config::{config_error, ConfigError, RunConfig};
use run::{run_training, RunManifest, RunOptions};

#[derive(Parser)]
#[command(name = "dacouple", version, about = "Domain-adaptive embedding learning on synthetic benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config layered over the desk profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// adaptive, unsupervised or direct-transfer; overrides `train.mode`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            c.train.seed = seed;
        }
        if let Some(mode) = &self.mode {
            c.train.mode = Mode::parse(mode).map_err(|e| config_error(e.to_string()))?;
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Checks every analytic gradient against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tolerance: Option<f64>,
        /// Random instances per check.
        #[arg(long)]
        instances: Option<usize>,
        /// Corrupts the analytic gradient of the named check (negative control).
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Trains one run and writes its manifest, metrics, checkpoints and eval.
    Train {
        #[command(flatten)]
        common: Common,
        /// Repeat the run recorded in this manifest (other config flags are ignored).
        #[arg(long, conflicts_with_all = ["config", "seed", "mode"])]
        manifest: Option<PathBuf>,
        /// Also checkpoint every this many epochs.
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// One-factor sweeps over seeds; writes median metrics per cell.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; replaces `ablate.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// `key=v1,v2,...` over a `[train]` setting; repeatable, replaces `ablate.grid`.
        #[arg(long)]
        grid: Vec<String>,
        /// Run only the base cell.
        #[arg(long, conflicts_with = "grid")]
        base_only: bool,
        /// Parallel workers; defaults to the available cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Writes the camera-gap table and base weight `w` for the initial bank.
    Gaps {
        #[command(flatten)]
        common: Common,
    },
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out_dir.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn cmd_gradcheck(common: &Common, tolerance: Option<f64>, instances: Option<usize>, fault: Option<String>) -> anyhow::Result<ExitCode> {
    let config = common.resolve()?;
    let mut opts = config.gradcheck.clone();
    if let Some(t) = tolerance {
        if !(t > 0.0) {
            return Err(config_error("--tolerance must be positive"));
        }
        opts.tolerance = t;
    }
    if let Some(n) = instances {
        opts.instances = n;
    }
    if let Some(s) = common.seed {
        opts.seed = s;
    }
    if fault.is_some() {
        opts.inject_fault = fault;
    }
    let report = certify(&opts)?;
    for c in &report.checks {
        eprintln!(
            "{:<22} {:>4} instances  {:>4} failures  max rel error {:.3e}  {}",
            c.name,
            c.instances,
            c.failures,
            c.max_rel_error,
            if c.pass { "ok" } else { "FAIL" }
        );
    }
    for note in &report.notes {
        eprintln!("note: {note}");
    }
    let json = serde_json::to_string_pretty(&report)?;
    match &common.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("gradcheck.json");
            fs::write(&path, json)?;
            eprintln!("report: {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_train(common: &Common, manifest: Option<&Path>, checkpoint_every: usize) -> anyhow::Result<ExitCode> {
    let config = match manifest {
        Some(p) => {
            let m = RunManifest::read(p)?;
            m.config.validate()?;
            m.config
        }
        None => common.resolve()?,
    };
    let dir = out_dir(common, "runs/train");
    let summary = run_training(&config, &dir, &RunOptions { checkpoint_every })?;
    if let Some(e) = &summary.eval {
        println!(
            "mode={} seed={} rank1={:.4} rank5={:.4} rank10={:.4} mAP={:.4} skipped={}",
            summary.mode, summary.seed, e.rank1, e.rank5, e.rank10, e.map, e.skipped
        );
    }
    eprintln!("artifacts: {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gaps(common: &Common) -> anyhow::Result<ExitCode> {
    let config = common.resolve()?;
    let bench = make_benchmark(&config.source, &config.target, config.train.seed)?;
    // Only the target bank matters here.
    let train = TrainConfig { mode: Mode::Unsupervised, ..config.train.clone() };
    let data = TrainData { source: None, ..TrainData::from(&bench) };
    let mut state = TrainState::init(&train, data)?;
    state.predict_labels()?;
    let gaps = state.gaps.as_ref().context("no gap table")?;
    let mut buf = Vec::new();
    gaps.write_csv(&mut buf)?;
    match &common.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("gaps.csv"), &buf)?;
        }
        None => print!("{}", String::from_utf8(buf)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Gradcheck { common, tolerance, instances, inject_fault } => {
            cmd_gradcheck(&common, tolerance, instances, inject_fault)
        }
        Command::Train { common, manifest, checkpoint_every } => cmd_train(&common, manifest.as_deref(), checkpoint_every),
        Command::Ablate { common, seeds, grid, base_only, jobs } => {
            let mut config = common.resolve()?;
            if let Some(seeds) = seeds {
                config.ablate.seeds = seeds;
            }
            if base_only {
                config.ablate.grid.clear();
            } else if !grid.is_empty() {
                config.ablate.grid = ablate::parse_grid_flags(&grid)?;
            }
            config.validate()?;
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            ablate::cmd_ablate(&config, &out_dir(&common, "runs/ablate"), jobs.max(1))
        }
        Command::Gaps { common } => cmd_gaps(&common),
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.is::<ConfigError>()
        || matches!(
            e.downcast_ref::<dacouple::Error>(),
            Some(dacouple::Error::InvalidConfig(_) | dacouple::Error::InvalidSpec(_))
        )
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
