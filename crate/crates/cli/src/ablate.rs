//! One-factor ablation sweeps.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use serde_json::Value;

use crate::config::{config_error, parse_grid_value, RunConfig};
use crate::run::{run_training, RunOptions, RunSummary};

pub struct Cell {
    pub name: String,
    pub key: String,
    pub value: String,
    pub config: RunConfig,
}

/// Median metrics of one cell; one CSV row.
#[derive(Debug, Clone, Serialize)]
pub struct CellRow {
    pub cell: String,
    pub key: String,
    pub value: String,
    pub seeds: usize,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

pub fn parse_grid_flags(flags: &[String]) -> anyhow::Result<BTreeMap<String, Vec<Value>>> {
    let mut grid = BTreeMap::new();
    for f in flags {
        let (key, values) = f
            .split_once('=')
            .ok_or_else(|| config_error(format!("--grid expects key=v1,v2,..., got {f:?}")))?;
        let values: Vec<Value> = values.split(',').filter(|v| !v.is_empty()).map(parse_grid_value).collect();
        if values.is_empty() {
            return Err(config_error(format!("--grid {key} has no values")));
        }
        grid.insert(key.trim().to_string(), values);
    }
    Ok(grid)
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// The base cell followed by one cell per grid value.
pub fn cells(config: &RunConfig) -> anyhow::Result<Vec<Cell>> {
    let mut out = vec![Cell {
        name: "base".into(),
        key: String::new(),
        value: String::new(),
        config: config.clone(),
    }];
    for (key, values) in &config.ablate.grid {
        for v in values {
            let value = value_label(v);
            out.push(Cell {
                name: format!("{key}={value}"),
                key: key.clone(),
                value,
                config: config.with_train_value(key, v)?,
            });
        }
    }
    Ok(out)
}

/// Median; the mean of the middle pair for even counts.
pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs every (cell, seed) pair on `jobs` workers. Each run writes its own
/// artifacts under `out_dir/runs/<cell>/seed-<seed>`.
pub fn run_cells(cells: &[Cell], seeds: &[u64], out_dir: &Path, jobs: usize) -> anyhow::Result<Vec<Vec<RunSummary>>> {
    let tasks: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<anyhow::Result<RunSummary>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(tasks.len()) {
            scope.spawn(|| loop {
                let t = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(c, seed)) = tasks.get(t) else { break };
                let cell = &cells[c];
                let mut config = cell.config.clone();
                config.train.seed = seed;
                let dir = out_dir.join("runs").join(&cell.name).join(format!("seed-{seed}"));
                let r = run_training(&config, &dir, &RunOptions { checkpoint_every: 0 });
                if let Ok(s) = &r {
                    if let Some(e) = &s.eval {
                        eprintln!("{:<24} seed {seed:<3} rank1 {:.4} mAP {:.4}", cell.name, e.rank1, e.map);
                    }
                }
                results.lock().unwrap()[t] = Some(r);
            });
        }
    });
    let mut flat = results.into_inner().unwrap().into_iter();
    let mut out = Vec::with_capacity(cells.len());
    for _ in cells {
        let mut per_cell = Vec::with_capacity(seeds.len());
        for _ in seeds {
            per_cell.push(flat.next().flatten().expect("every task ran")?);
        }
        out.push(per_cell);
    }
    Ok(out)
}

pub fn cmd_ablate(config: &RunConfig, out_dir: &Path, jobs: usize) -> anyhow::Result<ExitCode> {
    let cells = cells(config)?;
    std::fs::create_dir_all(out_dir)?;
    let runs = run_cells(&cells, &config.ablate.seeds, out_dir, jobs)?;
    let path = out_dir.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for (cell, runs) in cells.iter().zip(&runs) {
        let evals: Vec<_> = runs.iter().filter_map(|r| r.eval.as_ref()).collect();
        let pick = |f: fn(&dacouple::evaluation::EvalResult) -> f64| median(evals.iter().map(|e| f(e)).collect());
        let row = CellRow {
            cell: cell.name.clone(),
            key: cell.key.clone(),
            value: cell.value.clone(),
            seeds: evals.len(),
            rank1: pick(|e| e.rank1),
            rank5: pick(|e| e.rank5),
            rank10: pick(|e| e.rank10),
            map: pick(|e| e.map),
        };
        println!("{:<24} rank1 {:.4} rank5 {:.4} mAP {:.4}", row.cell, row.rank1, row.rank5, row.map);
        w.serialize(&row)?;
    }
    w.flush()?;
    eprintln!("table: {}", path.display());
    Ok(ExitCode::SUCCESS)
}
