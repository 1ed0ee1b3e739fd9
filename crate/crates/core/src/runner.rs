//! Run and sweep drivers that own the on-disk layout:
//! `<out>/<run-id>/{manifest.json, metrics.csv, policy_final.json}` and,
//! for sweeps, `<out>/sweep_summary.csv`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::{final_quartile_mean_entropy, MetricsSink, RunManifest, ARTIFACT_VERSION};
use crate::sim::run_experiment_with;
use crate::types::MetricsRecord;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const POLICY_FILE: &str = "policy_final.json";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";

/// Directory name of a run, unique across K and eps_high sweeps.
pub fn run_id(cfg: &TrainConfig) -> String {
    format!(
        "{}_K{}_eh{}_seed{}",
        cfg.estimator.as_str(),
        cfg.k,
        cfg.eps_high,
        cfg.seed
    )
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(file, value).map_err(|e| Error::Io(e.to_string()))
}

/// Runs `cfg` and writes its artifacts into `dir`, streaming one metrics
/// row per step. Returns the metrics history.
pub fn run_to_dir(cfg: &TrainConfig, dir: &Path) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    write_json(
        &dir.join(MANIFEST_FILE),
        &RunManifest {
            version: ARTIFACT_VERSION,
            seed: cfg.seed,
            config: cfg,
        },
    )?;
    let mut sink = MetricsSink::new(File::create(dir.join(METRICS_FILE))?);
    let state = run_experiment_with(cfg, |rec| sink.write_metrics(rec))?;
    write_json(&dir.join(POLICY_FILE), &state.policies)?;
    Ok(state.history)
}

/// Sweepable config field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "K")]
    K,
    #[serde(rename = "eps_high")]
    EpsHigh,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K => "K",
            SweepAxis::EpsHigh => "eps_high",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig, value: f64) {
        match self {
            SweepAxis::K => cfg.k = value,
            SweepAxis::EpsHigh => cfg.eps_high = value,
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "K" | "k" => Ok(SweepAxis::K),
            "eps_high" => Ok(SweepAxis::EpsHigh),
            other => Err(Error::Config(format!(
                "axis must be one of K, eps_high (got {other:?})"
            ))),
        }
    }
}

/// One row of `sweep_summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub seed: u64,
    pub run_dir: String,
    pub final_quartile_entropy: Option<f64>,
    pub final_pass_at_1: Option<f64>,
    /// `ok` or the error message of a failed cell.
    pub status: String,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Runs every `values x seeds` cell on a pool of `jobs` threads. Failed
/// cells are recorded and do not stop the sweep. Rows come back, and are
/// written, in value-major order regardless of completion order.
pub fn sweep(
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    out: &Path,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one value and one seed".into(),
        ));
    }
    fs::create_dir_all(out)?;
    let cells: Vec<(f64, u64)> = values
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(value, seed)| {
                let mut cfg = base.clone();
                axis.apply(&mut cfg, value);
                cfg.seed = seed;
                let id = run_id(&cfg);
                let outcome = run_to_dir(&cfg, &out.join(&id));
                let (fq, p1, status) = match outcome {
                    Ok(hist) => (
                        final_quartile_mean_entropy(&hist),
                        hist.last().map(|r| r.pass_at_1),
                        "ok".to_string(),
                    ),
                    Err(e) => (None, None, e.to_string()),
                };
                SweepRow {
                    axis,
                    value,
                    seed,
                    run_dir: id,
                    final_quartile_entropy: fq,
                    final_pass_at_1: p1,
                    status,
                }
            })
            .collect()
    });
    let mut writer = csv::Writer::from_path(out.join(SWEEP_SUMMARY_FILE))
        .map_err(|e| Error::Io(e.to_string()))?;
    for row in &rows {
        writer
            .serialize(row)
            .map_err(|e| Error::Io(e.to_string()))?;
    }
    writer.flush()?;
    Ok(rows)
}

/// Reads a `sweep_summary.csv`.
pub fn read_sweep_summary(path: &Path) -> Result<Vec<SweepRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Sink(e.to_string()))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Sink(e.to_string())))
        .collect()
}

/// Run directories of a sweep, keyed by axis value in summary order.
pub fn sweep_runs(dir: &Path) -> Result<Vec<(f64, Vec<PathBuf>)>> {
    let rows = read_sweep_summary(&dir.join(SWEEP_SUMMARY_FILE))?;
    let mut grouped: Vec<(f64, Vec<PathBuf>)> = Vec::new();
    for row in rows.iter().filter(|r| r.is_ok()) {
        let path = dir.join(&row.run_dir);
        match grouped.iter_mut().find(|(v, _)| *v == row.value) {
            Some((_, paths)) => paths.push(path),
            None => grouped.push((row.value, vec![path])),
        }
    }
    Ok(grouped)
}
