//! Experiment config files: TOML with `[benchmark]`, `[train]`, `[loss]` and
//! `[cluster]` sections. Every key is optional; an empty file is the default
//! desk-scale experiment. Model sizes live under `[train.model]`.

use std::path::{Path, PathBuf};

use domainmix_core::cluster::DbscanParams;
use domainmix_core::losses::LossConfig;
use domainmix_core::synthgen::BenchmarkSpec;
use domainmix_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::preset::Preset;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkSpec,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub cluster: DbscanParams,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        let table: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        if let Some(train) = table.get("train").and_then(|t| t.as_table()) {
            for key in ["loss", "cluster"] {
                if train.contains_key(key) {
                    return Err(format!("`train.{key}` is not allowed; use a top-level [{key}] section"));
                }
            }
        }
        table.try_into().map_err(|e: toml::de::Error| e.to_string())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Training config with the `[loss]` and `[cluster]` sections folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            cluster: self.cluster,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        self.train_config().validate()?;
        Ok(())
    }
}

/// Everything one `run` invocation needs for a single preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub config: ExperimentConfig,
    pub preset: Preset,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seed list is empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(CliError::Config(format!("duplicate seeds in {:?}", self.seeds)));
        }
        self.config.validate()?;
        self.train_template().validate()?;
        Ok(())
    }

    /// Preset-adjusted training config; the seed is filled in per run.
    pub fn train_template(&self) -> TrainConfig {
        self.preset.apply(&self.config.train_config())
    }

    pub fn benchmark_spec(&self, seed: u64) -> BenchmarkSpec {
        BenchmarkSpec {
            seed,
            ..self.config.benchmark.clone()
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train_template()
        }
    }

    /// Identifies the benchmark family: the benchmark section plus the seeds.
    pub fn benchmark_hash(&self) -> Result<String> {
        let spec = BenchmarkSpec {
            seed: 0,
            ..self.config.benchmark.clone()
        };
        crate::content_hash(&(spec, &self.seeds))
    }

    /// Identifies the resolved experiment: benchmark, preset, training config and seeds.
    pub fn config_hash(&self) -> Result<String> {
        crate::content_hash(&(self.benchmark_hash()?, self.preset, self.train_template()))
    }

    pub fn preset_dir(&self) -> PathBuf {
        self.out_dir.join(self.preset.name())
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.preset_dir().join(format!("seed_{seed}"))
    }
}

/// Parses `1,2,3`; ranges like `1-5` are accepted too.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || CliError::Config(format!("cannot parse seed list `{s}`"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn sections_fold_into_the_train_config() {
        let cfg = ExperimentConfig::from_toml_str(
            "[train]\ntotal_epochs = 3\nwarmup_epochs = 1\n[loss]\nlambda_m = 0.5\n[cluster]\neps = 0.4\n[benchmark]\nn_a = 10\n",
        )
        .unwrap();
        let t = cfg.train_config();
        assert_eq!(t.total_epochs, 3);
        assert_eq!(t.loss.lambda_m, 0.5);
        assert_eq!(t.cluster.eps, 0.4);
        assert_eq!(cfg.benchmark.n_a, 10);
        assert_eq!(t.k, TrainConfig::default().k);
    }

    #[test]
    fn unknown_keys_and_nested_sections_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[train]\ntotal_epoch = 3\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[train.loss]\nlambda_m = 1.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[optimizer]\n").is_err());
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("1,2,3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_seeds("1-3, 7").unwrap(), vec![1, 2, 3, 7]);
        assert!(parse_seeds("").is_err());
        assert!(parse_seeds("3-1").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn run_spec_rejects_bad_seed_lists() {
        let mut spec = RunSpec {
            config: ExperimentConfig::default(),
            preset: Preset::Dbscan,
            out_dir: "out".into(),
            seeds: vec![],
        };
        assert!(spec.validate().is_err());
        spec.seeds = vec![1, 1];
        assert!(spec.validate().is_err());
        spec.seeds = vec![1, 2];
        spec.validate().unwrap();
    }

    #[test]
    fn hashes_separate_presets_but_share_the_benchmark() {
        let spec = |preset| RunSpec {
            config: ExperimentConfig::default(),
            preset,
            out_dir: "out".into(),
            seeds: vec![1, 2],
        };
        let (a, b) = (spec(Preset::Dbscan), spec(Preset::DbscanQ));
        assert_eq!(a.benchmark_hash().unwrap(), b.benchmark_hash().unwrap());
        assert_ne!(a.config_hash().unwrap(), b.config_hash().unwrap());
        let mut c = spec(Preset::Dbscan);
        c.seeds = vec![1, 3];
        assert_ne!(a.benchmark_hash().unwrap(), c.benchmark_hash().unwrap());
    }
}
