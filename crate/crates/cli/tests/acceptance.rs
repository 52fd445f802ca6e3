//! Acceptance checks, one PASS/FAIL line each. Exits non-zero if any fail.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use domainmix::config::{ExperimentConfig, RunSpec};
use domainmix::{run_experiment, Aggregate, Preset};
use domainmix_core::cluster::{dbscan, quantity_keep, ClusterAssignment};
use domainmix_core::diffcore::{softmax, Matrix};
use domainmix_core::eval::{evaluate_features, map_oracle};
use domainmix_core::losses::domain_balance_loss;
use domainmix_core::model::{classify_identity, encode, normalize_features, ModelParams};
use domainmix_core::rng::SeedTree;
use domainmix_core::synthgen::{generate, BenchmarkSpec};
use domainmix_core::testing::{dbscan_oracle, gradient_case, GRADIENT_CASES};
use domainmix_core::train::{run_observed, EpochDataset, RunObserver, StepKind, StepRecord, TrainConfig};
use rand::Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(t: Instant, limit: Duration) -> Result<Duration, String> {
    let e = t.elapsed();
    if e <= limit {
        Ok(e)
    } else {
        Err(format!("took {e:.1?}, limit {limit:?}"))
    }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut n = 0;
    for seed in 0..8u64 {
        for name in GRADIENT_CASES {
            let err = gradient_case(name, seed).max_rel_error(1e-5).map_err(|e| e.to_string())?;
            if err > worst.0 || n == 0 {
                worst = (err, format!("{name}/{seed}"));
            }
            n += 1;
        }
    }
    let el = within(t, Duration::from_secs(30))?;
    check(
        n >= 100 && worst.0 < 1e-6,
        format!("{n} configurations, max rel error {:.2e} ({}), {el:.1?}", worst.0, worst.1),
    )
}

fn domain_balance() -> Outcome {
    let a = std::f64::consts::LN_2 / 2.0;
    let mut rng = SeedTree::new(2).rng("rows");
    let mut min_off = f64::INFINITY;
    for _ in 0..1000 {
        let p: f64 = rng.gen_range(0.0..1.0);
        if (p - 0.5).abs() < 1e-9 {
            continue;
        }
        let m = Matrix::from_rows(&[vec![p, 1.0 - p]]).unwrap();
        min_off = min_off.min(domain_balance_loss(&m, a));
    }
    let uniform = domain_balance_loss(&Matrix::from_rows(&[[0.5, 0.5]; 4]).unwrap(), a);
    let hand = domain_balance_loss(&Matrix::from_rows(&[vec![0.9, 0.1]]).unwrap(), a);
    check(
        uniform.abs() < 1e-15 && min_off > 0.0 && (hand - 0.3681).abs() < 1e-4,
        format!("uniform {uniform:.1e}, min over 1000 rows {min_off:.3e}, (0.9, 0.1) -> {hand:.4}"),
    )
}

fn dbscan_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = SeedTree::new(3).rng("dbscan");
    let mut clusters = 0;
    for inst in 0..50 {
        let n = rng.gen_range(5..=60);
        let d = rng.gen_range(1..=4);
        let grid = inst % 2 == 0;
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| if grid { rng.gen_range(0..6) as f64 * 0.5 } else { rng.gen_range(0.0..3.0) })
                    .collect()
            })
            .collect();
        let eps = if grid { 0.5 } else { rng.gen_range(0.2..1.0) };
        let min_samples = rng.gen_range(2..=5);
        let fast = dbscan(&pts, eps, min_samples).map_err(|e| e.to_string())?;
        let oracle = dbscan_oracle(&pts, eps, min_samples);
        if fast.labels != oracle {
            return Err(format!("instance {inst} (n={n}, d={d}) differs"));
        }
        clusters += fast.n_clusters();
    }
    let el = within(t, Duration::from_secs(10))?;
    Ok(format!("50 instances identical ({clusters} clusters total), {el:.1?}"))
}

fn quantity() -> Outcome {
    fn multisets(max_len: usize, lo: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        out.push(cur.clone());
        if cur.len() == max_len {
            return;
        }
        for s in lo..=10 {
            cur.push(s);
            multisets(max_len, s, cur, out);
            cur.pop();
        }
    }
    let mut all = Vec::new();
    multisets(4, 1, &mut Vec::new(), &mut all);
    let mut checks = 0;
    for sizes in &all {
        // clusters laid out in blocks, two noise points at the front
        let mut labels = vec![None, None];
        for (c, &s) in sizes.iter().enumerate() {
            labels.extend(std::iter::repeat_n(Some(c), s));
        }
        let assignment = ClusterAssignment {
            labels,
            sizes: sizes.clone(),
        };
        for b in 0..=10 {
            let expected: Vec<usize> = (0..sizes.len()).filter(|&i| sizes[i] >= b).collect();
            let got: Vec<usize> = quantity_keep(&assignment, b).into_iter().collect();
            if got != expected {
                return Err(format!("sizes {sizes:?}, b {b}: {got:?} vs {expected:?}"));
            }
            checks += 1;
        }
    }
    Ok(format!("{} multisets x 11 bounds = {checks} checks", all.len()))
}

fn retrieval() -> Outcome {
    let mut rng = SeedTree::new(5).rng("retrieval");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.gen_range(1..=4);
        let ids = rng.gen_range(2..=5);
        let ng = rng.gen_range(ids..=20);
        let nq = rng.gen_range(1..=6);
        let gallery_ids: Vec<usize> = (0..ng).map(|i| if i < ids { i } else { rng.gen_range(0..ids) }).collect();
        let query_ids: Vec<usize> = (0..nq).map(|_| rng.gen_range(0..ids)).collect();
        let mut feats = |n: usize| {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            Matrix::from_rows(&rows).unwrap()
        };
        let (q, g) = (feats(nq), feats(ng));
        let fast = evaluate_features(&q, &query_ids, &g, &gallery_ids).map_err(|e| e.to_string())?;
        let slow = map_oracle(&q, &query_ids, &g, &gallery_ids).map_err(|e| e.to_string())?;
        worst = worst.max((fast.map - slow).abs());
    }
    let col = |v: &[f64]| Matrix::from_rows(&v.iter().map(|&x| vec![x]).collect::<Vec<_>>()).unwrap();
    let hand = evaluate_features(&col(&[0.0]), &[7], &col(&[0.1, 0.2, 0.3, 0.4]), &[7, 1, 7, 2])
        .map_err(|e| e.to_string())?
        .map;
    check(
        worst < 1e-12 && (hand - 5.0 / 6.0).abs() < 1e-15,
        format!("100 instances, max |evaluate - oracle| {worst:.1e}; hand case {hand}"),
    )
}

fn alternation() -> Outcome {
    let bench = generate(&BenchmarkSpec {
        seed: 1,
        ..BenchmarkSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        seed: 1,
        eval_every_epoch: false,
        ..TrainConfig::default()
    };
    let mut counts = BTreeMap::new();
    let mut violations = Vec::new();
    run_observed(&cfg, &bench, &mut |r: &StepRecord| {
        *counts.entry(format!("{:?}", r.kind)).or_insert(0usize) += 1;
        let both = r.backbone_changed() && r.discriminator_changed();
        let warm = r.warmup && r.discriminator_changed();
        let wrong = match r.kind {
            StepKind::Backbone => r.discriminator_changed(),
            StepKind::Discriminator | StepKind::SkippedDiscriminator => r.backbone_changed(),
        };
        if both || warm || wrong {
            violations.push((r.epoch, r.iter));
        }
    })
    .map_err(|e| e.to_string())?;
    check(
        violations.is_empty() && counts.get("Discriminator").copied().unwrap_or(0) > 0,
        format!("{counts:?}, violations {violations:?}"),
    )
}

const TABLE_PRESETS: [Preset; 7] = [
    Preset::Dbscan,
    Preset::DbscanQ,
    Preset::DomainmixUnlabeled,
    Preset::NoAci,
    Preset::NoDb,
    Preset::OnlyA,
    Preset::DomainmixLabeled,
];

fn table_runs(out: &Path) -> Result<(BTreeMap<Preset, Aggregate>, Duration), String> {
    let t = Instant::now();
    let mut aggs = BTreeMap::new();
    for preset in TABLE_PRESETS {
        let spec = RunSpec {
            config: ExperimentConfig::default(),
            preset,
            out_dir: out.to_path_buf(),
            seeds: vec![1, 2, 3, 4, 5],
        };
        aggs.insert(preset, run_experiment(&spec).map_err(|e| e.to_string())?);
    }
    Ok((aggs, t.elapsed()))
}

fn ordering(aggs: &BTreeMap<Preset, Aggregate>, elapsed: Duration) -> Outcome {
    let m = |p: Preset| aggs[&p].median_map;
    let pairs = [
        ("a", Preset::DbscanQ, Preset::Dbscan, false),
        ("b", Preset::DomainmixUnlabeled, Preset::NoAci, false),
        ("c", Preset::DomainmixUnlabeled, Preset::NoDb, false),
        ("d", Preset::DomainmixUnlabeled, Preset::OnlyA, false),
        ("e", Preset::DomainmixLabeled, Preset::DomainmixUnlabeled, true),
    ];
    let mut ok = elapsed < Duration::from_secs(600);
    let mut parts = Vec::new();
    for (tag, hi, lo, weak) in pairs {
        let pass = if weak { m(hi) >= m(lo) } else { m(hi) > m(lo) };
        ok &= pass;
        let rel = if weak { ">=" } else { ">" };
        parts.push(format!(
            "({tag}) {hi} {:.3} {rel} {lo} {:.3}{}",
            m(hi),
            m(lo),
            if pass { "" } else { " NO" }
        ));
    }
    check(ok, format!("{}; {elapsed:.1?}", parts.join(", ")))
}

fn adversarial(aggs: &BTreeMap<Preset, Aggregate>) -> Outcome {
    let kl = |p: Preset| aggs[&p].median_domain_kl.ok_or(format!("{p} has no domain KL"));
    let (with_db, without) = (kl(Preset::DomainmixUnlabeled)?, kl(Preset::NoDb)?);
    check(
        with_db < 0.05 && without > 0.2,
        format!("median KL with lambda_m=1: {with_db:.4} (need < 0.05), with lambda_m=0: {without:.4} (need > 0.2)"),
    )
}

/// Counts, per epoch, clustered points whose own pseudo class gets more than
/// `1/M` softmax probability right after the classifier is initialized.
struct AciAudit(Vec<(usize, usize)>);

impl RunObserver for AciAudit {
    fn classifier_ready(&mut self, epoch: usize, ds: &EpochDataset, params: &ModelParams) {
        let feats = normalize_features(&encode(&params.encoder, &ds.inputs).expect("encoder fits inputs"));
        let probs = softmax(&classify_identity(&params.head, &feats).expect("head fits features"));
        let chance = 1.0 / ds.n_classes as f64;
        if self.0.len() <= epoch {
            self.0.resize(epoch + 1, (0, 0));
        }
        for c in ds.n_synthetic..ds.n_classes {
            for &row in &ds.by_class[c] {
                self.0[epoch].1 += 1;
                if probs.row(row)[c] > chance {
                    self.0[epoch].0 += 1;
                }
            }
        }
    }
}

fn aci_warm_start() -> Outcome {
    let per_seed: Vec<Result<Vec<(usize, usize)>, String>> = (1..=20u64)
        .into_par_iter()
        .map(|seed| {
            let bench = generate(&BenchmarkSpec {
                seed,
                ..BenchmarkSpec::default()
            })
            .map_err(|e| e.to_string())?;
            let cfg = TrainConfig {
                seed,
                eval_every_epoch: false,
                ..TrainConfig::default()
            };
            let mut audit = AciAudit(Vec::new());
            run_observed(&cfg, &bench, &mut audit).map_err(|e| e.to_string())?;
            Ok(audit.0)
        })
        .collect();
    let mut by_epoch: Vec<(usize, usize)> = Vec::new();
    for r in per_seed {
        for (e, (hit, n)) in r?.into_iter().enumerate() {
            if by_epoch.len() <= e {
                by_epoch.resize(e + 1, (0, 0));
            }
            by_epoch[e].0 += hit;
            by_epoch[e].1 += n;
        }
    }
    let (hit, total) = by_epoch.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let frac = hit as f64 / total.max(1) as f64;
    let (h0, n0) = by_epoch.first().copied().unwrap_or((0, 0));
    check(
        total > 0 && frac >= 0.95,
        format!(
            "{hit}/{total} clustered points above 1/M over all initializations ({:.1}%); epoch 0 with the untrained encoder {h0}/{n0} ({:.1}%)",
            100.0 * frac,
            100.0 * h0 as f64 / n0.max(1) as f64
        ),
    )
}

fn determinism(out: &Path) -> Outcome {
    let mut bytes = Vec::new();
    for run in ["first", "second"] {
        let spec = RunSpec {
            config: ExperimentConfig::default(),
            preset: Preset::DomainmixUnlabeled,
            out_dir: out.join(run),
            seeds: vec![7],
        };
        run_experiment(&spec).map_err(|e| e.to_string())?;
        bytes.push(std::fs::read(spec.seed_dir(7).join("epochs.csv")).map_err(|e| e.to_string())?);
    }
    check(
        bytes[0] == bytes[1],
        format!("epoch CSV {} bytes, identical: {}", bytes[0].len(), bytes[0] == bytes[1]),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient correctness", gradients()),
        (2, "domain balance minimum", domain_balance()),
        (3, "DBSCAN oracle equivalence", dbscan_equivalence()),
        (4, "quantity criterion", quantity()),
        (5, "mAP/CMC oracle", retrieval()),
        (6, "alternation contract", alternation()),
    ];
    match table_runs(&tmp.path().join("table")) {
        Ok((aggs, elapsed)) => {
            results.push((7, "ablation ordering", ordering(&aggs, elapsed)));
            results.push((8, "adversarial effect", adversarial(&aggs)));
        }
        Err(e) => {
            results.push((7, "ablation ordering", Err(e.clone())));
            results.push((8, "adversarial effect", Err(e)));
        }
    }
    results.push((9, "ACI warm start", aci_warm_start()));
    results.push((10, "determinism", determinism(&tmp.path().join("det"))));

    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Ok(d) => println!("PASS criterion {n:>2} {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {n:>2} {name}: {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
