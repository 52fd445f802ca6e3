//! Side-by-side table of preset medians with deltas against a baseline.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{CliError, Result};
use crate::preset::Preset;
use crate::runner::Aggregate;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub preset: Preset,
    pub n_seeds: usize,
    #[serde(rename = "median_mAP")]
    pub median_map: f64,
    pub median_rank1: f64,
    #[serde(rename = "delta_mAP")]
    pub delta_map: f64,
    pub delta_rank1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub baseline: Preset,
    pub benchmark_hash: String,
    pub rows: Vec<ComparisonRow>,
}

/// Loads aggregate files, failing on the first unreadable one.
pub fn load_aggregates<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<Aggregate>> {
    paths.iter().map(Aggregate::load).collect()
}

/// Baseline is `dbscan` when present, otherwise the first aggregate.
pub fn compare_presets(aggregates: &[Aggregate]) -> Result<Comparison> {
    if aggregates.len() < 2 {
        return Err(CliError::Compare(format!(
            "need at least 2 aggregates, got {}",
            aggregates.len()
        )));
    }
    let hash = &aggregates[0].benchmark_hash;
    if let Some(other) = aggregates.iter().find(|a| &a.benchmark_hash != hash) {
        return Err(CliError::Compare(format!(
            "benchmark hash of {} ({}) differs from {} ({})",
            other.preset, other.benchmark_hash, aggregates[0].preset, hash
        )));
    }
    let base = aggregates
        .iter()
        .find(|a| a.preset == Preset::Dbscan)
        .unwrap_or(&aggregates[0]);
    let rows = aggregates
        .iter()
        .map(|a| ComparisonRow {
            preset: a.preset,
            n_seeds: a.seeds.len(),
            median_map: a.median_map,
            median_rank1: a.median_rank1,
            delta_map: a.median_map - base.median_map,
            delta_rank1: a.median_rank1 - base.median_rank1,
        })
        .collect();
    Ok(Comparison {
        baseline: base.preset,
        benchmark_hash: hash.clone(),
        rows,
    })
}

impl Comparison {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Baseline: `{}`, benchmark `{}`\n", self.baseline, short(&self.benchmark_hash));
        s.push_str("| preset | seeds | median mAP | median rank-1 | Δ mAP | Δ rank-1 |\n");
        s.push_str("|---|---:|---:|---:|---:|---:|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {:.2} | {:.2} | {:+.2} | {:+.2} |",
                r.preset,
                r.n_seeds,
                100.0 * r.median_map,
                100.0 * r.median_rank1,
                100.0 * r.delta_map,
                100.0 * r.delta_rank1
            );
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| CliError::Compare(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Compare(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}
