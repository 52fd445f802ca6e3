//! Experiment runner for the domainmix benchmark: config files, ablation
//! presets, per-seed artifacts and cross-preset comparison tables.

pub mod compare;
pub mod config;
pub mod error;
pub mod preset;
pub mod runner;

pub use compare::{compare_presets, Comparison, ComparisonRow};
pub use config::{ExperimentConfig, RunSpec};
pub use error::{CliError, Result};
pub use preset::Preset;
pub use runner::{run_experiment, Aggregate, Manifest, RunStatus, SeedReport};

use sha2::{Digest, Sha256};

/// Environment variable capping the worker threads used for seeds and
/// distance computations.
pub const THREADS_ENV: &str = "DOMAINMIX_THREADS";

/// Hex SHA-256 of a value's JSON encoding.
pub fn content_hash<T: serde::Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value).map_err(|e| CliError::Config(format!("cannot hash value: {e}")))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Builds the global rayon pool from `DOMAINMIX_THREADS` when it is set.
/// Returns the thread count that was applied.
pub fn init_thread_pool() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot build thread pool: {e}")))?;
    Ok(Some(n))
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = content_hash(&(1, "x")).unwrap();
        assert_eq!(a, content_hash(&(1, "x")).unwrap());
        assert_ne!(a, content_hash(&(2, "x")).unwrap());
        assert_eq!(a.len(), 64);
    }
}
