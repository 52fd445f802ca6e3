//! DBSCAN and the cluster reliability criteria used to turn clusters of
//! unlabeled features into pseudo-labels.
//!
//! Conventions:
//! - a point's eps-neighborhood is closed and contains the point itself;
//! - a point is core iff its neighborhood holds at least `min_samples` points;
//! - clusters are numbered in the order of their lowest-index core point, and a
//!   border point reachable from several clusters joins the lowest-numbered one.
//!
//! Independence and compactness re-run DBSCAN at a loosened (`eps_loose`) and
//! tightened (`eps_tight`) radius and compare each cluster with its
//! counterpart:
//! - independence ratio `|C| / |host|`, where `host` is the loose cluster
//!   holding most of `C`'s points;
//! - compactness ratio `|largest tight cluster inside C| / |C|`, points that
//!   turn into noise counting against the numerator.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::l2_dist;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_samples: usize,
    pub eps_loose: f64,
    pub eps_tight: f64,
    pub indep_threshold: f64,
    pub comp_threshold: f64,
    /// Minimum cluster size kept by the quantity criterion.
    pub quantity_bound: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        Self::with_eps(0.5, 4, 4)
    }
}

impl DbscanParams {
    /// Loose/tight radii at ±2% of `eps`, both ratio thresholds at 0.9.
    pub fn with_eps(eps: f64, min_samples: usize, quantity_bound: usize) -> Self {
        Self {
            eps,
            min_samples,
            eps_loose: 1.02 * eps,
            eps_tight: 0.98 * eps,
            indep_threshold: 0.9,
            comp_threshold: 0.9,
            quantity_bound,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(self.eps_tight > 0.0 && self.eps_tight < self.eps && self.eps < self.eps_loose) {
            return Err(Error::Config(format!(
                "need 0 < eps_tight < eps < eps_loose, got {} / {} / {}",
                self.eps_tight, self.eps, self.eps_loose
            )));
        }
        if self.min_samples == 0 || self.quantity_bound == 0 {
            return Err(Error::Config(
                "min_samples and quantity_bound must be >= 1".into(),
            ));
        }
        for (name, t) in [
            ("indep_threshold", self.indep_threshold),
            ("comp_threshold", self.comp_threshold),
        ] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {t}")));
            }
        }
        Ok(())
    }
}

/// Which reliability criteria are enabled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriteriaFlags {
    pub independence: bool,
    pub compactness: bool,
    pub quantity: bool,
}

impl CriteriaFlags {
    pub const NONE: CriteriaFlags = CriteriaFlags {
        independence: false,
        compactness: false,
        quantity: false,
    };
    pub const ALL: CriteriaFlags = CriteriaFlags {
        independence: true,
        compactness: true,
        quantity: true,
    };
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster id per point, `None` for noise.
    pub labels: Vec<Option<usize>>,
    /// Points per cluster.
    pub sizes: Vec<usize>,
}

impl ClusterAssignment {
    pub fn n_clusters(&self) -> usize {
        self.sizes.len()
    }

    pub fn n_noise(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// Point indices of every cluster, in index order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.sizes.len()];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                out[*c].push(i);
            }
        }
        out
    }
}

/// Symmetric pairwise Euclidean distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

const PARALLEL_ROWS: usize = 256;

impl DistanceMatrix {
    pub fn new<R: AsRef<[f64]> + Sync>(points: &[R]) -> Result<Self> {
        let n = points.len();
        if let Some(first) = points.first() {
            let d = first.as_ref().len();
            if let Some(i) = points.iter().position(|p| p.as_ref().len() != d) {
                return Err(Error::Argument(format!(
                    "point {i} has dimension {}, expected {d}",
                    points[i].as_ref().len()
                )));
            }
        }
        let mut data = vec![0.0; n * n];
        let fill = |(i, row): (usize, &mut [f64])| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = l2_dist(points[i].as_ref(), points[j].as_ref());
            }
        };
        if n >= PARALLEL_ROWS {
            data.par_chunks_mut(n.max(1)).enumerate().for_each(fill);
        } else {
            data.chunks_mut(n.max(1)).enumerate().for_each(fill);
        }
        Ok(Self { n, data })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    fn neighbors(&self, i: usize, eps: f64) -> impl Iterator<Item = usize> + '_ {
        let row = &self.data[i * self.n..(i + 1) * self.n];
        row.iter()
            .enumerate()
            .filter(move |(_, &d)| d <= eps)
            .map(|(j, _)| j)
    }
}

pub fn dbscan<R: AsRef<[f64]> + Sync>(
    points: &[R],
    eps: f64,
    min_samples: usize,
) -> Result<ClusterAssignment> {
    if points.is_empty() {
        return Err(Error::Argument("dbscan needs at least one point".into()));
    }
    let dist = DistanceMatrix::new(points)?;
    Ok(dbscan_with_distances(&dist, eps, min_samples))
}

pub fn dbscan_with_distances(dist: &DistanceMatrix, eps: f64, min_samples: usize) -> ClusterAssignment {
    let n = dist.len();
    let core: Vec<bool> = (0..n)
        .map(|i| dist.neighbors(i, eps).count() >= min_samples)
        .collect();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if labels[seed].is_some() || !core[seed] {
            continue;
        }
        let c = sizes.len();
        let mut size = 1;
        labels[seed] = Some(c);
        queue.push_back(seed);
        while let Some(q) = queue.pop_front() {
            for j in dist.neighbors(q, eps) {
                if labels[j].is_none() {
                    labels[j] = Some(c);
                    size += 1;
                    if core[j] {
                        queue.push_back(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    ClusterAssignment { labels, sizes }
}

/// Clusters whose loose-radius host did not absorb much extra material.
pub fn independence_keep(
    dist: &DistanceMatrix,
    assignment: &ClusterAssignment,
    params: &DbscanParams,
) -> BTreeSet<usize> {
    let loose = dbscan_with_distances(dist, params.eps_loose, params.min_samples);
    independence_ratios(assignment, &loose)
        .into_iter()
        .enumerate()
        .filter(|(_, r)| *r >= params.indep_threshold)
        .map(|(i, _)| i)
        .collect()
}

/// `|C_i| / |host_i|` per cluster. A cluster whose points all became noise
/// at the loose radius has no host and gets ratio 1.
pub fn independence_ratios(assignment: &ClusterAssignment, loose: &ClusterAssignment) -> Vec<f64> {
    assignment
        .members()
        .iter()
        .map(|pts| match plurality(pts.iter().filter_map(|&p| loose.labels[p])) {
            Some((host, _)) => pts.len() as f64 / loose.sizes[host] as f64,
            None => 1.0,
        })
        .collect()
}

/// Clusters that stay mostly in one piece at the tight radius.
pub fn compactness_keep(
    dist: &DistanceMatrix,
    assignment: &ClusterAssignment,
    params: &DbscanParams,
) -> BTreeSet<usize> {
    let tight = dbscan_with_distances(dist, params.eps_tight, params.min_samples);
    compactness_ratios(assignment, &tight)
        .into_iter()
        .enumerate()
        .filter(|(_, r)| *r >= params.comp_threshold)
        .map(|(i, _)| i)
        .collect()
}

/// `|largest tight piece of C_i| / |C_i|` per cluster.
pub fn compactness_ratios(assignment: &ClusterAssignment, tight: &ClusterAssignment) -> Vec<f64> {
    assignment
        .members()
        .iter()
        .map(|pts| {
            let largest = plurality(pts.iter().filter_map(|&p| tight.labels[p])).map_or(0, |(_, c)| c);
            largest as f64 / pts.len() as f64
        })
        .collect()
}

/// Clusters with at least `b` members.
pub fn quantity_keep(assignment: &ClusterAssignment, b: usize) -> BTreeSet<usize> {
    assignment
        .sizes
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= b)
        .map(|(i, _)| i)
        .collect()
}

/// Most frequent label and its count, ties to the smaller label.
fn plurality(labels: impl Iterator<Item = usize>) -> Option<(usize, usize)> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .fold(None, |best, (l, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((l, c)),
        })
}

/// Per-epoch clustering summary, also the JSON debug dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub epoch: Option<usize>,
    /// Raw DBSCAN cluster count.
    #[serde(rename = "M")]
    pub m: usize,
    /// Clusters surviving every enabled criterion.
    #[serde(rename = "M_prime")]
    pub m_prime: usize,
    pub sizes: Vec<usize>,
    pub n_noise: usize,
    pub kept_ids_per_criterion: KeptIds,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeptIds {
    pub independence: Option<Vec<usize>>,
    pub compactness: Option<Vec<usize>>,
    pub quantity: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Pseudo-label per point, re-indexed `0..n_kept`; `None` if excluded.
    pub pseudo_labels: Vec<Option<usize>>,
    pub n_kept: usize,
    pub report: ClusterReport,
}

impl Selection {
    /// Point indices of every kept pseudo-class.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_kept];
        for (i, l) in self.pseudo_labels.iter().enumerate() {
            if let Some(c) = l {
                out[*c].push(i);
            }
        }
        out
    }
}

/// Clusters `points` and keeps the clusters passing every enabled criterion.
pub fn select_reliable<R: AsRef<[f64]> + Sync>(
    points: &[R],
    params: &DbscanParams,
    flags: CriteriaFlags,
) -> Result<Selection> {
    params.validate()?;
    if points.is_empty() {
        return Ok(Selection {
            pseudo_labels: Vec::new(),
            n_kept: 0,
            report: ClusterReport {
                epoch: None,
                m: 0,
                m_prime: 0,
                sizes: Vec::new(),
                n_noise: 0,
                kept_ids_per_criterion: KeptIds::default(),
            },
        });
    }
    let dist = DistanceMatrix::new(points)?;
    let base = dbscan_with_distances(&dist, params.eps, params.min_samples);

    let mut kept: BTreeSet<usize> = (0..base.n_clusters()).collect();
    let mut per = KeptIds::default();
    if flags.independence {
        let k = independence_keep(&dist, &base, params);
        per.independence = Some(k.iter().copied().collect());
        kept = &kept & &k;
    }
    if flags.compactness {
        let k = compactness_keep(&dist, &base, params);
        per.compactness = Some(k.iter().copied().collect());
        kept = &kept & &k;
    }
    if flags.quantity {
        let k = quantity_keep(&base, params.quantity_bound);
        per.quantity = Some(k.iter().copied().collect());
        kept = &kept & &k;
    }

    let remap: BTreeMap<usize, usize> = kept.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let pseudo_labels = base
        .labels
        .iter()
        .map(|l| l.and_then(|c| remap.get(&c).copied()))
        .collect();
    Ok(Selection {
        pseudo_labels,
        n_kept: remap.len(),
        report: ClusterReport {
            epoch: None,
            m: base.n_clusters(),
            m_prime: remap.len(),
            n_noise: base.n_noise(),
            sizes: base.sizes,
            kept_ids_per_criterion: per,
        },
    })
}
