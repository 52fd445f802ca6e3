//! Three-domain toy benchmark.
//!
//! Domain A is the labeled synthetic source, B the unlabeled real source and C
//! the unseen target. Every identity is an anchor on a sphere of radius
//! `anchor_radius`; a sample is the domain's affine map applied to its
//! anchor plus noise. The noise has an isotropic part of scale `sigma` and a
//! low-rank "nuisance" part of scale `sigma * nuisance_gain` living in a
//! domain-specific subspace. The nuisance subspaces of B and C are small
//! perturbations of one shared frame, while A's is unrelated, so suppressing
//! B's nuisance also helps on C. Anchors are drawn in antipodal pairs, which
//! centers each domain's identity cloud at the origin before the affine map.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{dot, Matrix};
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    SynthA,
    RealB,
    TargetC,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::SynthA, Domain::RealB, Domain::TargetC];

    fn index(self) -> usize {
        match self {
            Domain::SynthA => 0,
            Domain::RealB => 1,
            Domain::TargetC => 2,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::SynthA => "SynthA",
            Domain::RealB => "RealB",
            Domain::TargetC => "TargetC",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SynthA" => Ok(Domain::SynthA),
            "RealB" => Ok(Domain::RealB),
            "TargetC" => Ok(Domain::TargetC),
            other => Err(Error::Argument(format!("unknown domain `{other}`"))),
        }
    }
}

/// A labeled (or evaluation) sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub input: Vec<f64>,
    pub domain: Domain,
    pub identity: Option<usize>,
}

/// Training-facing view of a domain-B sample. It carries no identity.
///
/// ```compile_fail
/// let s = domainmix_core::synthgen::UnlabeledSample { id: 0, input: vec![] };
/// let _ = s.identity;
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSample {
    pub id: u64,
    pub input: Vec<f64>,
}

impl AsRef<[f64]> for Sample {
    fn as_ref(&self) -> &[f64] {
        &self.input
    }
}

impl AsRef<[f64]> for UnlabeledSample {
    fn as_ref(&self) -> &[f64] {
        &self.input
    }
}

/// Affine map `x -> scale · x + offset` (column-vector convention).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub scale: Matrix,
    pub offset: Vec<f64>,
}

impl DomainShift {
    pub fn identity(dim: usize) -> Self {
        Self {
            scale: Matrix::identity(dim),
            offset: vec![0.0; dim],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.offset.len())
            .map(|i| dot(self.scale.row(i), x) + self.offset[i])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub d_in: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub n_c: usize,
    pub k_a: usize,
    pub k_b: usize,
    pub k_c: usize,
    pub sigma: f64,
    pub query_fraction: f64,
    pub anchor_radius: f64,
    /// Norm of each generated domain offset.
    pub offset_norm: f64,
    /// Strength of the random linear distortion in each generated scale matrix.
    pub mixing: f64,
    pub nuisance_rank: usize,
    pub nuisance_gain: f64,
    /// Perturbation applied to the shared real-world nuisance frame for B and C.
    pub real_frame_jitter: f64,
    /// Explicit per-domain maps (A, B, C); generated from the seed when absent.
    pub shifts: Option<[DomainShift; 3]>,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            d_in: 16,
            n_a: 32,
            n_b: 24,
            n_c: 16,
            k_a: 8,
            k_b: 8,
            k_c: 8,
            sigma: 0.15,
            query_fraction: 0.25,
            anchor_radius: 3.0,
            offset_norm: 2.0,
            mixing: 0.3,
            nuisance_rank: 4,
            nuisance_gain: 10.0,
            real_frame_jitter: 0.2,
            shifts: None,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_in == 0 {
            return bad("d_in must be positive".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be finite and >= 0, got {}", self.sigma));
        }
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return bad(format!(
                "query_fraction must lie in (0, 1), got {}",
                self.query_fraction
            ));
        }
        if self.k_c < 2 {
            return bad(format!(
                "k_c = {} cannot give every query identity a gallery match",
                self.k_c
            ));
        }
        if self.n_c == 0 {
            return bad("n_c must be positive".into());
        }
        if self.nuisance_rank > self.d_in {
            return bad("nuisance_rank exceeds d_in".into());
        }
        if let Some(shifts) = &self.shifts {
            for s in shifts {
                if s.scale.shape() != (self.d_in, self.d_in) || s.offset.len() != self.d_in {
                    return bad("explicit domain shift does not match d_in".into());
                }
            }
        }
        Ok(())
    }

    /// Number of queries drawn per target identity.
    pub fn queries_per_identity(&self) -> usize {
        queries_per_identity(self.k_c, self.query_fraction)
    }

    pub fn domain_shifts(&self) -> [DomainShift; 3] {
        if let Some(s) = &self.shifts {
            return s.clone();
        }
        let mut rng = SeedTree::new(self.seed).rng("synthgen/shifts");
        std::array::from_fn(|_| {
            let d = self.d_in;
            let mut scale = Matrix::identity(d);
            let c = self.mixing / (d as f64).sqrt();
            for v in scale.data_mut() {
                *v += c * normal(&mut rng);
            }
            let dir = random_unit(&mut rng, d);
            DomainShift {
                scale,
                offset: dir.iter().map(|v| v * self.offset_norm).collect(),
            }
        })
    }

    /// Orthonormal nuisance frames (columns as rows of the returned matrices) for A, B, C.
    fn nuisance_frames(&self) -> [Matrix; 3] {
        let (d, r) = (self.d_in, self.nuisance_rank);
        let mut rng = SeedTree::new(self.seed).rng("synthgen/nuisance");
        let frame_a = orthonormal_rows(&random_rows(&mut rng, r, d));
        let shared = random_rows(&mut rng, r, d);
        let mut jittered = || {
            let mut m = shared.clone();
            for v in m.data_mut() {
                *v += self.real_frame_jitter * normal(&mut rng);
            }
            orthonormal_rows(&m)
        };
        let frame_b = jittered();
        let frame_c = jittered();
        [frame_a, frame_b, frame_c]
    }
}

fn queries_per_identity(k_c: usize, fraction: f64) -> usize {
    ((fraction * k_c as f64).round() as usize).clamp(1, k_c.saturating_sub(1).max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train_a: Vec<Sample>,
    pub train_b: Vec<UnlabeledSample>,
    pub query_c: Vec<Sample>,
    pub gallery_c: Vec<Sample>,
    hidden_b: Option<Vec<usize>>,
}

impl Benchmark {
    /// Ground-truth identities of B, aligned with `train_b`. Only the labeled
    /// upper-bound preset and diagnostics read this; the unlabeled pipeline
    /// never does.
    pub fn reveal_b_identities(&self) -> Option<&[usize]> {
        self.hidden_b.as_deref()
    }

    /// Drops the real-world training split and its hidden identities.
    pub fn without_real_data(mut self) -> Self {
        self.train_b = Vec::new();
        self.hidden_b = None;
        self
    }

    pub fn d_in(&self) -> usize {
        self.train_a
            .first()
            .map(|s| s.input.len())
            .or_else(|| self.query_c.first().map(|s| s.input.len()))
            .unwrap_or(0)
    }

    /// Number of synthetic identities (labels `0..n`).
    pub fn n_synthetic(&self) -> usize {
        self.train_a
            .iter()
            .filter_map(|s| s.identity)
            .max()
            .map_or(0, |m| m + 1)
    }
}

/// Rows of `samples` as a matrix.
pub fn input_matrix<S: AsRef<[f64]>>(samples: &[S]) -> Matrix {
    Matrix::from_rows(&samples.iter().map(|s| s.as_ref()).collect::<Vec<_>>())
        .expect("samples of one benchmark share a dimension")
}

pub fn generate(spec: &BenchmarkSpec) -> Result<Benchmark> {
    spec.validate()?;
    let shifts = spec.domain_shifts();
    let frames = spec.nuisance_frames();
    let tree = SeedTree::new(spec.seed);
    let mut anchor_rng = tree.rng("synthgen/anchors");

    let mut next_identity = 0usize;
    let mut next_id = 0u64;
    let mut per_domain: Vec<Vec<Sample>> = Vec::with_capacity(3);
    for (domain, n_ids, k) in [
        (Domain::SynthA, spec.n_a, spec.k_a),
        (Domain::RealB, spec.n_b, spec.k_b),
        (Domain::TargetC, spec.n_c, spec.k_c),
    ] {
        let anchors = antipodal_anchors(&mut anchor_rng, n_ids, spec.d_in, spec.anchor_radius);
        let mut noise_rng = tree.child("synthgen/noise").rng(&domain.to_string());
        let shift = &shifts[domain.index()];
        let frame = &frames[domain.index()];
        let mut out = Vec::with_capacity(n_ids * k);
        for (a, anchor) in anchors.iter().enumerate() {
            let base = shift.apply(anchor);
            for _ in 0..k {
                let input = perturb(&base, frame, spec, &mut noise_rng);
                out.push(Sample {
                    id: next_id,
                    input,
                    domain,
                    identity: Some(next_identity + a),
                });
                next_id += 1;
            }
        }
        next_identity += n_ids;
        per_domain.push(out);
    }

    let c = per_domain.pop().expect("three domains");
    let b = per_domain.pop().expect("three domains");
    let a = per_domain.pop().expect("three domains");
    let (query_c, gallery_c) = split_query_gallery(c, spec.queries_per_identity());
    let hidden_b = Some(b.iter().map(|s| s.identity.expect("generated")).collect());
    let train_b = b
        .into_iter()
        .map(|s| UnlabeledSample {
            id: s.id,
            input: s.input,
        })
        .collect();
    Ok(Benchmark {
        train_a: a,
        train_b,
        query_c,
        gallery_c,
        hidden_b,
    })
}

/// Fresh draws from the same A and B identities, for held-out diagnostics.
/// Returns `(A samples, B inputs)`.
pub fn generate_holdout(spec: &BenchmarkSpec, per_identity: usize) -> Result<(Vec<Sample>, Vec<UnlabeledSample>)> {
    spec.validate()?;
    let shifts = spec.domain_shifts();
    let frames = spec.nuisance_frames();
    let tree = SeedTree::new(spec.seed);
    let mut anchor_rng = tree.rng("synthgen/anchors");
    let anchors_a = antipodal_anchors(&mut anchor_rng, spec.n_a, spec.d_in, spec.anchor_radius);
    let anchors_b = antipodal_anchors(&mut anchor_rng, spec.n_b, spec.d_in, spec.anchor_radius);
    let mut rng = tree.rng("synthgen/holdout");
    let mut a = Vec::new();
    let mut id = 0u64;
    for (i, anchor) in anchors_a.iter().enumerate() {
        let base = shifts[0].apply(anchor);
        for _ in 0..per_identity {
            a.push(Sample {
                id,
                input: perturb(&base, &frames[0], spec, &mut rng),
                domain: Domain::SynthA,
                identity: Some(i),
            });
            id += 1;
        }
    }
    let mut b = Vec::new();
    for anchor in &anchors_b {
        let base = shifts[1].apply(anchor);
        for _ in 0..per_identity {
            b.push(UnlabeledSample {
                id,
                input: perturb(&base, &frames[1], spec, &mut rng),
            });
            id += 1;
        }
    }
    Ok((a, b))
}

fn perturb(base: &[f64], frame: &Matrix, spec: &BenchmarkSpec, rng: &mut Rng) -> Vec<f64> {
    let mut x: Vec<f64> = base.iter().map(|v| v + spec.sigma * normal(rng)).collect();
    let g = spec.sigma * spec.nuisance_gain;
    for r in 0..frame.rows() {
        let s = g * normal(rng);
        for (xi, ui) in x.iter_mut().zip(frame.row(r)) {
            *xi += s * ui;
        }
    }
    x
}

/// Stratified split: within each identity, the first `n_query` samples (in id
/// order) are queries and the rest form the gallery.
fn split_query_gallery(samples: Vec<Sample>, n_query: usize) -> (Vec<Sample>, Vec<Sample>) {
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for s in samples {
        let count = seen.entry(s.identity.expect("target samples are labeled")).or_insert(0);
        if *count < n_query {
            query.push(s);
        } else {
            gallery.push(s);
        }
        *count += 1;
    }
    (query, gallery)
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn antipodal_anchors(rng: &mut Rng, n: usize, d: usize, radius: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u: Vec<f64> = random_unit(rng, d).into_iter().map(|v| v * radius).collect();
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        out.push(u);
        if out.len() < n {
            out.push(neg);
        }
    }
    // antipodal partners should not end up with adjacent identity ids
    for i in (1..out.len()).rev() {
        let j = rng.gen_range(0..=i);
        out.swap(i, j);
    }
    out
}

fn random_rows(rng: &mut Rng, r: usize, d: usize) -> Matrix {
    let data = (0..r * d).map(|_| normal(rng)).collect();
    Matrix::from_vec(r, d, data).expect("sized")
}

fn orthonormal_rows(m: &Matrix) -> Matrix {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let mut v = m.row(i).to_vec();
        for u in &out {
            let p = dot(&v, u);
            for (a, b) in v.iter_mut().zip(u) {
                *a -= p * b;
            }
        }
        let n = dot(&v, &v).sqrt();
        out.push(v.into_iter().map(|x| x / n).collect());
    }
    Matrix::from_rows(&out).unwrap_or_else(|_| Matrix::zeros(0, m.cols()))
}

/// Euclidean distance between the mean input vectors of two sample sets.
pub fn domain_gap_score<A: AsRef<[f64]>, B: AsRef<[f64]>>(a: &[A], b: &[B]) -> Result<f64> {
    let ma = mean_vector(a)?;
    let mb = mean_vector(b)?;
    if ma.len() != mb.len() {
        return Err(Error::Argument(format!(
            "dimension {} vs {}",
            ma.len(),
            mb.len()
        )));
    }
    Ok(ma
        .iter()
        .zip(&mb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

fn mean_vector<S: AsRef<[f64]>>(set: &[S]) -> Result<Vec<f64>> {
    let first = set
        .first()
        .ok_or_else(|| Error::Argument("domain_gap_score needs non-empty sets".into()))?;
    let d = first.as_ref().len();
    let mut mean = vec![0.0; d];
    for s in set {
        let s = s.as_ref();
        if s.len() != d {
            return Err(Error::Argument("mixed dimensions in one set".into()));
        }
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= set.len() as f64;
    }
    Ok(mean)
}

const CSV_FIXED: [&str; 3] = ["id", "domain", "identity"];

/// Writes every sample as `id,domain,identity,feat_0..feat_{D-1}`. B's
/// identity column is left empty. Query rows precede gallery rows for each
/// target identity, which is how [`load_csv`] recovers the split.
pub fn dump_csv(bench: &Benchmark, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let d = bench.d_in();
    let mut header: Vec<String> = CSV_FIXED.iter().map(|s| s.to_string()).collect();
    header.extend((0..d).map(|i| format!("feat_{i}")));
    w.write_record(&header)?;

    let mut write = |id: u64, domain: Domain, identity: Option<usize>, input: &[f64]| {
        let mut rec = vec![
            id.to_string(),
            domain.to_string(),
            identity.map(|v| v.to_string()).unwrap_or_default(),
        ];
        // `{}` on f64 prints the shortest string that parses back to the same bits
        rec.extend(input.iter().map(|v| format!("{v}")));
        w.write_record(&rec)
    };
    for s in &bench.train_a {
        write(s.id, s.domain, s.identity, &s.input)?;
    }
    for s in &bench.train_b {
        write(s.id, Domain::RealB, None, &s.input)?;
    }
    let mut c: Vec<&Sample> = bench.query_c.iter().chain(&bench.gallery_c).collect();
    c.sort_by_key(|s| s.id);
    for s in c {
        write(s.id, s.domain, s.identity, &s.input)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a benchmark written by [`dump_csv`]. B loses its hidden identities;
/// the target split is re-derived with `query_fraction`.
pub fn load_csv(path: impl AsRef<Path>, query_fraction: f64) -> Result<Benchmark> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers()?.clone();
    if headers.len() < 3 || headers.iter().take(3).ne(CSV_FIXED) {
        return Err(Error::Argument(format!(
            "{}: header must start with id,domain,identity",
            path.display()
        )));
    }
    let d = headers.len() - 3;
    let mut train_a = Vec::new();
    let mut train_b = Vec::new();
    let mut target = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse_err = |what: &str| Error::Argument(format!("{}: bad {what} in row {:?}", path.display(), rec));
        let id: u64 = rec[0].parse().map_err(|_| parse_err("id"))?;
        let domain: Domain = rec[1].parse()?;
        let identity = match &rec[2] {
            "" => None,
            s => Some(s.parse::<usize>().map_err(|_| parse_err("identity"))?),
        };
        let input = (0..d)
            .map(|i| rec[3 + i].parse::<f64>().map_err(|_| parse_err("feature")))
            .collect::<Result<Vec<_>>>()?;
        match domain {
            Domain::SynthA => {
                if identity.is_none() {
                    return Err(parse_err("missing synthetic identity"));
                }
                train_a.push(Sample { id, input, domain, identity });
            }
            Domain::RealB => train_b.push(UnlabeledSample { id, input }),
            Domain::TargetC => {
                if identity.is_none() {
                    return Err(parse_err("missing target identity"));
                }
                target.push(Sample { id, input, domain, identity });
            }
        }
    }
    let k_c = target
        .iter()
        .fold(BTreeMap::<usize, usize>::new(), |mut m, s| {
            *m.entry(s.identity.expect("checked")).or_insert(0) += 1;
            m
        })
        .into_values()
        .min()
        .unwrap_or(0);
    if k_c < 2 {
        return Err(Error::Config(
            "every target identity needs at least two samples".into(),
        ));
    }
    let (query_c, gallery_c) = split_query_gallery(target, queries_per_identity(k_c, query_fraction));
    Ok(Benchmark {
        train_a,
        train_b,
        query_c,
        gallery_c,
        hidden_b: None,
    })
}
