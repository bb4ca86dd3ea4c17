//! File outputs for the three commands: verification sweeps, training runs
//! and ablation grids. All tables are long-format CSV with a header row.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::objective::Variant;
use crate::trainer::{train, write_metrics_csv, EnvSpec, RunMetrics, TrainConfig};
use crate::verify::{run_fixture, run_sweep, write_rows_csv, SweepConfig, SweepReport};

/// Environment variable overriding the default output directory.
pub const OUT_ENV_VAR: &str = "RPO_LAB_OUT";
pub const DEFAULT_OUT_DIR: &str = "rpo-lab-out";
/// Trailing fraction of updates summarized as "final" metrics.
pub const FINAL_WINDOW: f64 = 0.2;

/// Explicit flag, then `RPO_LAB_OUT`, then [`DEFAULT_OUT_DIR`].
pub fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub checks: usize,
    pub failures: usize,
    pub failing_seeds: Vec<u64>,
    pub psi_samples: usize,
    pub psi_two_term_members: usize,
    pub psi_violations: usize,
    pub psi_witnesses: usize,
}

/// Record of one command invocation. Timestamps are the only fields that
/// vary between identical invocations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandManifest {
    pub command_line: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<PathBuf>,
    pub verify: Option<VerifySummary>,
}

impl CommandManifest {
    fn new(command_line: &[String], config: serde_json::Value, seeds: Vec<u64>) -> Self {
        Self {
            command_line: command_line.to_vec(),
            config,
            seeds,
            started_unix: unix_now(),
            finished_unix: 0,
            outputs: Vec::new(),
            verify: None,
        }
    }

    fn finish(mut self, dir: &Path, name: &str) -> Result<(Self, PathBuf)> {
        self.finished_unix = unix_now();
        let path = dir.join(name);
        write_json(&path, &self)?;
        Ok((self, path))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRequest {
    pub sweep: SweepConfig,
    /// Run the battery on this MDP file instead of random instances.
    pub mdp: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub report: SweepReport,
    pub summary: VerifySummary,
    pub csv_path: PathBuf,
    pub manifest_path: PathBuf,
}

pub fn run_verify(request: &VerifyRequest, out_dir: &Path, command_line: &[String]) -> Result<VerifyOutcome> {
    fs::create_dir_all(out_dir)?;
    let report = match &request.mdp {
        Some(path) => {
            let mdp = TabularMdp::load(path)?;
            run_fixture(
                &mdp,
                request.sweep.seed,
                &request.sweep.k_list,
                request.sweep.psi_samples,
            )?
        }
        None => run_sweep(&request.sweep)?,
    };
    let csv_path = out_dir.join("verify.csv");
    write_rows_csv(&report.rows, create(&csv_path)?)?;
    let mut failing_seeds: Vec<u64> = report.failures().map(|r| r.instance_seed).collect();
    failing_seeds.dedup();
    let summary = VerifySummary {
        checks: report.rows.len(),
        failures: report.failures().count(),
        failing_seeds,
        psi_samples: report.psi.samples,
        psi_two_term_members: report.psi.in_psi2,
        psi_violations: report.psi.violations,
        psi_witnesses: report.psi.witnesses,
    };
    let mut manifest = CommandManifest::new(command_line, serde_json::to_value(request)?, vec![request.sweep.seed]);
    manifest.outputs.push(csv_path.clone());
    manifest.verify = Some(summary.clone());
    let (_, manifest_path) = manifest.finish(out_dir, "verify_manifest.json")?;
    Ok(VerifyOutcome {
        report,
        summary,
        csv_path,
        manifest_path,
    })
}

/// Final-window summary of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_return: f64,
    pub final_len: f64,
    pub cliff_falls: u64,
}

impl RunSummary {
    pub fn of(metrics: &RunMetrics) -> Self {
        Self {
            final_return: metrics.final_window_mean(FINAL_WINDOW, |r| r.mean_return),
            final_len: metrics.final_window_mean(FINAL_WINDOW, |r| r.mean_ep_len),
            cliff_falls: metrics.final_cliff_falls(),
        }
    }
}

/// Parses `cliffwalking` or a path to an MDP TOML file.
pub fn parse_env(value: &str, max_episode_steps: usize) -> EnvSpec {
    if value == "cliffwalking" {
        EnvSpec::default()
    } else {
        EnvSpec::Mdp {
            path: PathBuf::from(value),
            max_episode_steps,
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let vals: Vec<f64> = xs.iter().copied().filter(|v| v.is_finite()).collect();
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

type SummaryColumn = (&'static str, fn(&RunSummary) -> f64);

pub fn aggregate(summaries: &[RunSummary]) -> Vec<AggregateRow> {
    let columns: [SummaryColumn; 3] = [
        ("final_return", |s| s.final_return),
        ("final_len", |s| s.final_len),
        ("cliff_falls", |s| s.cliff_falls as f64),
    ];
    columns
        .iter()
        .map(|(name, get)| {
            let xs: Vec<f64> = summaries.iter().map(get).collect();
            let (mean, std) = mean_std(&xs);
            AggregateRow {
                metric: (*name).into(),
                mean,
                std,
                n_seeds: summaries.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcomeFiles {
    pub runs: Vec<RunMetrics>,
    pub summaries: Vec<RunSummary>,
    pub run_csvs: Vec<PathBuf>,
    pub aggregate_csv: PathBuf,
    pub manifest_path: PathBuf,
}

/// Trains `base` once per seed in `seeds` (in parallel), writing one metrics
/// CSV and run manifest per seed plus an aggregate table.
pub fn run_train(
    base: &TrainConfig,
    seeds: &[u64],
    out_dir: &Path,
    command_line: &[String],
) -> Result<TrainOutcomeFiles> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    base.validate()?;
    fs::create_dir_all(out_dir)?;
    let manifest = CommandManifest::new(command_line, serde_json::to_value(base)?, seeds.to_vec());
    let tag = base.clip.variant.as_str();
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..base.clone() };
            let metrics = train(&cfg)?.metrics;
            let csv_path = out_dir.join(format!("{tag}_seed{seed}.csv"));
            write_metrics_csv(&metrics.records, create(&csv_path)?)?;
            write_json(
                &out_dir.join(format!("{tag}_seed{seed}.manifest.json")),
                &metrics.manifest,
            )?;
            Ok((metrics, csv_path))
        })
        .collect::<Result<Vec<_>>>()?;
    let summaries: Vec<RunSummary> = runs.iter().map(|(m, _)| RunSummary::of(m)).collect();
    let aggregate_csv = out_dir.join(format!("{tag}_aggregate.csv"));
    let mut w = csv::Writer::from_writer(create(&aggregate_csv)?);
    for row in aggregate(&summaries) {
        w.serialize(row)?;
    }
    w.flush()?;
    drop(w);
    let mut manifest = manifest;
    manifest.outputs = runs.iter().map(|(_, p)| p.clone()).collect();
    manifest.outputs.push(aggregate_csv.clone());
    let (_, manifest_path) = manifest.finish(out_dir, &format!("{tag}_manifest.json"))?;
    let (runs, run_csvs) = runs.into_iter().unzip();
    Ok(TrainOutcomeFiles {
        runs,
        summaries,
        run_csvs,
        aggregate_csv,
        manifest_path,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub epsilon1: f64,
    pub beta: f64,
    pub seed: u64,
    pub final_return: f64,
    pub final_len: f64,
    pub cliff_falls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRequest {
    pub base: TrainConfig,
    pub variants: Vec<Variant>,
    pub epsilon1_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl AblationRequest {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.epsilon1_grid.is_empty() || self.beta_grid.is_empty() {
            return Err(Error::Config("ablation grid is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    /// Cross product in (variant, ε₁, β, seed) order.
    pub fn configs(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &epsilon1 in &self.epsilon1_grid {
                for &beta in &self.beta_grid {
                    for &seed in &self.seeds {
                        let mut cfg = self.base.clone();
                        cfg.clip.variant = variant;
                        cfg.clip.epsilon1 = epsilon1;
                        cfg.clip.beta = beta;
                        cfg.seed = seed;
                        out.push(cfg);
                    }
                }
            }
        }
        out
    }
}

pub fn run_ablation(
    request: &AblationRequest,
    out_dir: &Path,
    command_line: &[String],
) -> Result<(Vec<AblationRow>, PathBuf)> {
    request.validate()?;
    fs::create_dir_all(out_dir)?;
    let manifest = CommandManifest::new(command_line, serde_json::to_value(request)?, request.seeds.clone());
    let rows = request
        .configs()
        .par_iter()
        .map(|cfg| {
            let summary = RunSummary::of(&train(cfg)?.metrics);
            Ok(AblationRow {
                variant: cfg.clip.variant,
                epsilon1: cfg.clip.epsilon1,
                beta: cfg.clip.beta,
                seed: cfg.seed,
                final_return: summary.final_return,
                final_len: summary.final_len,
                cliff_falls: summary.cliff_falls,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = out_dir.join("ablation.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    drop(w);
    let mut manifest = manifest;
    manifest.outputs.push(path.clone());
    manifest.finish(out_dir, "ablation_manifest.json")?;
    Ok((rows, path))
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    csv::Reader::from_path(path)?
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}
