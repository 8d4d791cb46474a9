//! One training run and its artifacts.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use dacouple::evaluation::EvalResult;
use dacouple::models::{write_checkpoint, ModelKind};
use dacouple::synthetic::make_benchmark;
use dacouple::training::{train, EpochMetrics, Mode, TrainData, TrainState};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputPaths {
    pub manifest: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: PathBuf,
    pub eval: PathBuf,
}

impl OutputPaths {
    pub fn under(dir: &Path) -> Self {
        Self {
            manifest: dir.join("manifest.json"),
            metrics: dir.join("metrics.csv"),
            checkpoints: dir.join("checkpoints"),
            eval: dir.join("eval.json"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timings {
    /// Seconds since the Unix epoch when the run started.
    pub started_unix: f64,
    pub data_generation_s: f64,
}

/// Everything needed to repeat a run. Written once, before training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub seed: u64,
    pub code_version: String,
    pub outputs: OutputPaths,
    pub timings: Timings,
}

impl RunManifest {
    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
        Ok(serde_json::from_reader(f)?)
    }
}

/// Result written to `eval.json` after training.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub mode: String,
    pub train_s: f64,
    pub epochs: usize,
    pub eval: Option<EvalResult>,
}

pub struct RunOptions {
    /// Also checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

fn checkpoint(state: &TrainState, path: &Path) -> dacouple::Result<()> {
    let mut models = vec![(ModelKind::Encoder, &state.encoder.net), (ModelKind::Discriminator, &state.dnet.net)];
    if let Some(c) = &state.classifier {
        models.push((ModelKind::Classifier, &c.net));
    }
    write_checkpoint(BufWriter::new(File::create(path)?), &models)
}

/// Trains `config` into `out_dir`: manifest first, then per-epoch metrics
/// and checkpoints, then `eval.json`.
pub fn run_training(config: &RunConfig, out_dir: &Path, opts: &RunOptions) -> anyhow::Result<RunSummary> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH)?.as_secs_f64();
    let clock = Instant::now();
    let outputs = OutputPaths::under(out_dir);
    fs::create_dir_all(&outputs.checkpoints).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let seed = config.train.seed;
    let bench = make_benchmark(&config.source, &config.target, seed)?;
    let manifest = RunManifest {
        config: config.clone(),
        seed,
        code_version: CODE_VERSION.to_string(),
        outputs: outputs.clone(),
        timings: Timings {
            started_unix: started,
            data_generation_s: clock.elapsed().as_secs_f64(),
        },
    };
    fs::write(&outputs.manifest, serde_json::to_string_pretty(&manifest)?)?;

    let clock = Instant::now();
    let mut metrics = csv::Writer::from_path(&outputs.metrics)?;
    let on_epoch = |state: &TrainState, m: &EpochMetrics| -> dacouple::Result<()> {
        metrics.serialize(m)?;
        metrics.flush()?;
        if opts.checkpoint_every > 0 && m.epoch % opts.checkpoint_every == 0 {
            let path = outputs.checkpoints.join(format!("epoch-{:03}.dack", m.epoch));
            checkpoint(state, &path)?;
        }
        Ok(())
    };
    let mut data = TrainData::from(&bench);
    if config.train.mode == Mode::Unsupervised {
        data.source = None;
    }
    let (state, outcome) = train(&config.train, data, on_epoch)?;
    checkpoint(&state, &outputs.checkpoints.join("final.dack"))?;
    let summary = RunSummary {
        seed,
        mode: state.config.mode.as_str().to_string(),
        train_s: clock.elapsed().as_secs_f64(),
        epochs: outcome.history.len(),
        eval: outcome.final_eval,
    };
    fs::write(&outputs.eval, serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
