//! `run`: train every seed of one preset and write its artifacts.
//!
//! Layout under `out/<preset>/`:
//! `MANIFEST`, `config.json`, `aggregate.json`, and per seed
//! `seed_<s>/{epochs.csv, report.json, per_query_ap.csv, checkpoint.bin}`.

use std::path::{Path, PathBuf};

use domainmix_core::eval::{domain_confusion, EvalReport};
use domainmix_core::synthgen::{generate, generate_holdout, input_matrix};
use domainmix_core::train::{run, write_epoch_csv_tagged};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunSpec;
use crate::error::{CliError, Result};
use crate::preset::Preset;

/// Held-out samples per identity for the domain-confusion measurement.
const HOLDOUT_PER_IDENTITY: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub preset: Preset,
    pub seed: u64,
    pub config_hash: String,
    pub benchmark_hash: String,
    /// Mean KL(discriminator output || uniform) over held-out A and B samples.
    pub domain_kl: Option<f64>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub preset: Preset,
    pub config_hash: String,
    pub benchmark_hash: String,
    pub seeds: Vec<u64>,
    #[serde(rename = "mAP")]
    pub map: Vec<f64>,
    pub rank1: Vec<f64>,
    pub domain_kl: Option<Vec<f64>>,
    #[serde(rename = "median_mAP")]
    pub median_map: f64,
    pub median_rank1: f64,
    pub median_domain_kl: Option<f64>,
}

impl Aggregate {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Incomplete,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: RunStatus,
    pub preset: Preset,
    pub config_hash: String,
    pub benchmark_hash: String,
    pub seeds: Vec<u64>,
    pub completed: Vec<u64>,
    pub failures: Vec<SeedFailure>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

pub fn manifest_path(spec: &RunSpec) -> PathBuf {
    spec.preset_dir().join("MANIFEST")
}

pub fn aggregate_path(spec: &RunSpec) -> PathBuf {
    spec.preset_dir().join("aggregate.json")
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    config_hash: &'a str,
    benchmark_hash: &'a str,
    spec: &'a RunSpec,
    train: domainmix_core::train::TrainConfig,
}

/// Runs every seed (in parallel) and writes the aggregate. A failed seed
/// leaves the manifest marked incomplete and returns an error once the
/// remaining seeds have finished.
pub fn run_experiment(spec: &RunSpec) -> Result<Aggregate> {
    spec.validate()?;
    let dir = spec.preset_dir();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let config_hash = spec.config_hash()?;
    let benchmark_hash = spec.benchmark_hash()?;
    let mut manifest = Manifest {
        status: RunStatus::Incomplete,
        preset: spec.preset,
        config_hash: config_hash.clone(),
        benchmark_hash: benchmark_hash.clone(),
        seeds: spec.seeds.clone(),
        completed: Vec::new(),
        failures: Vec::new(),
    };
    write_json(&manifest_path(spec), &manifest)?;
    write_json(
        &dir.join("config.json"),
        &ResolvedConfig {
            config_hash: &config_hash,
            benchmark_hash: &benchmark_hash,
            spec,
            train: spec.train_template(),
        },
    )?;
    log::info!(
        "preset {} ({}), seeds {:?}, config {}",
        spec.preset,
        spec.preset.description(),
        spec.seeds,
        &config_hash[..12]
    );

    let results: Vec<(u64, Result<SeedReport>)> = spec
        .seeds
        .par_iter()
        .map(|&seed| (seed, run_seed(spec, seed, &config_hash, &benchmark_hash)))
        .collect();

    let mut reports = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(rep) => {
                manifest.completed.push(seed);
                reports.push(rep);
            }
            Err(e) => {
                log::error!("preset {} seed {seed}: {e}", spec.preset);
                manifest.failures.push(SeedFailure {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    if !manifest.failures.is_empty() {
        write_json(&manifest_path(spec), &manifest)?;
        return Err(CliError::Incomplete {
            failed: manifest.failures.len(),
            total: spec.seeds.len(),
            manifest: manifest_path(spec),
        });
    }

    let map: Vec<f64> = reports.iter().map(|r| r.report.map).collect();
    let rank1: Vec<f64> = reports.iter().map(|r| r.report.rank1()).collect();
    let domain_kl: Option<Vec<f64>> = reports.iter().map(|r| r.domain_kl).collect();
    let aggregate = Aggregate {
        preset: spec.preset,
        config_hash,
        benchmark_hash,
        seeds: spec.seeds.clone(),
        median_map: crate::median(&map),
        median_rank1: crate::median(&rank1),
        median_domain_kl: domain_kl.as_deref().map(crate::median),
        map,
        rank1,
        domain_kl,
    };
    write_json(&aggregate_path(spec), &aggregate)?;
    manifest.status = RunStatus::Complete;
    write_json(&manifest_path(spec), &manifest)?;
    log::info!(
        "preset {}: median mAP {:.4}, median rank-1 {:.4}",
        spec.preset,
        aggregate.median_map,
        aggregate.median_rank1
    );
    Ok(aggregate)
}

fn run_seed(spec: &RunSpec, seed: u64, config_hash: &str, benchmark_hash: &str) -> Result<SeedReport> {
    let dir = spec.seed_dir(seed);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let bench_spec = spec.benchmark_spec(seed);
    let mut bench = generate(&bench_spec)?;
    if !spec.preset.uses_real_data() {
        bench = bench.without_real_data();
    }
    let cfg = spec.train_config(seed);
    let out = run(&cfg, &bench)?;
    let report = out
        .final_report()
        .cloned()
        .ok_or_else(|| CliError::Config("training ran no epochs".into()))?;

    let domain_kl = if spec.preset.uses_real_data() {
        let (ha, hb) = generate_holdout(&bench_spec, HOLDOUT_PER_IDENTITY)?;
        let mut rows: Vec<&[f64]> = ha.iter().map(|s| s.input.as_slice()).collect();
        rows.extend(hb.iter().map(|s| s.input.as_slice()));
        Some(domain_confusion(&out.params.encoder, &out.params.discriminator, &input_matrix(&rows))?)
    } else {
        None
    };

    let tag = format!(
        "preset={} seed={seed} config_hash={config_hash} benchmark_hash={benchmark_hash}",
        spec.preset
    );
    write_epoch_csv_tagged(&out.logs, dir.join("epochs.csv"), Some(&tag))?;
    report.write_per_query_csv(dir.join("per_query_ap.csv"))?;
    out.params
        .checkpoint(cfg.total_epochs, config_hash)
        .save(dir.join("checkpoint.bin"))?;
    let seed_report = SeedReport {
        preset: spec.preset,
        seed,
        config_hash: config_hash.to_string(),
        benchmark_hash: benchmark_hash.to_string(),
        domain_kl,
        report,
    };
    write_json(&dir.join("report.json"), &seed_report)?;
    log::info!("preset {} seed {seed}: mAP {:.4}", spec.preset, seed_report.report.map);
    Ok(seed_report)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Json {
        path: path.to_path_buf(),
        source: e,
    })
}
