//! The alternating training loop: per-epoch pseudo-labeled dataset, classifier
//! re-initialization, PK batches, warm-up, then discriminator and backbone
//! steps taking turns.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::{debug, info, warn};
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cluster::{select_reliable, ClusterReport, CriteriaFlags, DbscanParams};
use crate::diffcore::{AdamConfig, AdamState, Matrix, Tape};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::losses::{domain_balance_loss, LossConfig, LossParts};
use crate::model::{
    adaptive_init, discriminate, encode, normalize_features, ClassifierHead, ModelConfig,
    ModelParams, Mlp, W1Source, W1_SLOT, W2_SLOT,
};
use crate::rng::{Rng, SeedTree};
use crate::synthgen::{input_matrix, Benchmark, Sample, UnlabeledSample};

/// Domain label of synthetic rows in the discriminator's two-way split.
pub const DOMAIN_SYNTH: usize = 0;
/// Domain label of real rows.
pub const DOMAIN_REAL: usize = 1;

/// How the identity classifier is set up at the start of each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInit {
    /// Synthetic block carried over, pseudo block from cluster means.
    Adaptive,
    /// Both blocks drawn at random every epoch.
    Random,
}

/// What the real domain contributes to each epoch's dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RealData {
    /// Clustered and filtered into pseudo classes.
    Unlabeled,
    /// Ground-truth identities used directly, no clustering.
    Labeled,
    /// Ignored entirely.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub iters_per_epoch: usize,
    /// Post warm-up, batch `i` trains the discriminator iff `i % disc_period == 0`.
    pub disc_period: usize,
    pub p: usize,
    pub k: usize,
    pub lr0: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub cluster: DbscanParams,
    pub criteria: CriteriaFlags,
    pub model: ModelConfig,
    pub classifier_init: ClassifierInit,
    pub real_data: RealData,
    /// Evaluate on the target domain after every epoch rather than only the last.
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_epochs: 12,
            warmup_epochs: 6,
            iters_per_epoch: 50,
            disc_period: 2,
            p: 8,
            k: 4,
            lr0: 1e-3,
            lr_milestones: vec![8, 10],
            lr_decay: 0.1,
            weight_decay: 5e-4,
            seed: 0,
            loss: LossConfig::default(),
            cluster: DbscanParams::default(),
            criteria: CriteriaFlags::ALL,
            model: ModelConfig::default(),
            classifier_init: ClassifierInit::Adaptive,
            real_data: RealData::Unlabeled,
            eval_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be >= 1".into()));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.iters_per_epoch == 0 {
            return Err(Error::Config("iters_per_epoch must be >= 1".into()));
        }
        if self.disc_period < 2 {
            return Err(Error::Config(format!(
                "disc_period must be >= 2, got {}",
                self.disc_period
            )));
        }
        if self.p == 0 || self.k < 2 {
            return Err(Error::Config(format!(
                "need P >= 1 and K >= 2, got P={} K={}",
                self.p, self.k
            )));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        let m = &self.model;
        if m.hidden == 0 || m.d_feat == 0 || m.disc_hidden == 0 {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        self.loss.validate()?;
        if self.loss.n_domains != 2 {
            return Err(Error::Config(format!(
                "the discriminator separates two source domains, got n_domains={}",
                self.loss.n_domains
            )));
        }
        self.cluster.validate()
    }

    /// Learning rate for a 0-based epoch: one decay per milestone already reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr0 * self.lr_decay.powi(passed as i32)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr0,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// One epoch's mixed training set.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochDataset {
    pub inputs: Matrix,
    /// Synthetic rows keep labels `0..n_synthetic`; pseudo classes follow.
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub n_synthetic: usize,
    pub n_classes: usize,
    /// Row indices of each class.
    pub by_class: Vec<Vec<usize>>,
    pub cluster_report: Option<ClusterReport>,
}

impl EpochDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_pseudo_classes(&self) -> usize {
        self.n_classes - self.n_synthetic
    }

    /// Rows carrying a pseudo (real-domain) label.
    pub fn n_pseudo_samples(&self) -> usize {
        self.domains.iter().filter(|&&d| d == DOMAIN_REAL).count()
    }

    /// Members of pseudo class `i` (global label `n_synthetic + i`) as rows.
    pub fn pseudo_class_rows(&self, i: usize) -> &[usize] {
        &self.by_class[self.n_synthetic + i]
    }

    fn assemble(
        synthetic: &[Sample],
        n_synthetic: usize,
        real: Vec<(&[f64], usize)>,
        n_pseudo: usize,
        cluster_report: Option<ClusterReport>,
    ) -> Result<Self> {
        let mut rows: Vec<&[f64]> = Vec::with_capacity(synthetic.len() + real.len());
        let mut labels = Vec::with_capacity(rows.capacity());
        let mut domains = Vec::with_capacity(rows.capacity());
        for s in synthetic {
            let y = s
                .identity
                .ok_or_else(|| Error::Argument(format!("synthetic sample {} has no identity", s.id)))?;
            if y >= n_synthetic {
                return Err(Error::Argument(format!(
                    "synthetic identity {y} >= class count {n_synthetic}"
                )));
            }
            rows.push(&s.input);
            labels.push(y);
            domains.push(DOMAIN_SYNTH);
        }
        for (x, pseudo) in real {
            rows.push(x);
            labels.push(n_synthetic + pseudo);
            domains.push(DOMAIN_REAL);
        }
        let n_classes = n_synthetic + n_pseudo;
        let mut by_class = vec![Vec::new(); n_classes];
        for (i, &y) in labels.iter().enumerate() {
            by_class[y].push(i);
        }
        let inputs = if rows.is_empty() {
            Matrix::zeros(0, 0)
        } else {
            Matrix::from_rows(&rows)?
        };
        Ok(Self {
            inputs,
            labels,
            domains,
            n_synthetic,
            n_classes,
            by_class,
            cluster_report,
        })
    }
}

/// Synthetic rows only.
pub fn synthetic_dataset(train_a: &[Sample], n_synthetic: usize) -> Result<EpochDataset> {
    EpochDataset::assemble(train_a, n_synthetic, Vec::new(), 0, None)
}

/// Clusters the normalized encodings of `train_b`, keeps the reliable
/// clusters and appends them to the synthetic rows as classes
/// `n_synthetic..n_synthetic + M'`. Unclustered or rejected points are left out.
pub fn build_epoch_dataset(
    encoder: &Mlp,
    train_a: &[Sample],
    train_b: &[UnlabeledSample],
    n_synthetic: usize,
    params: &DbscanParams,
    flags: CriteriaFlags,
) -> Result<EpochDataset> {
    if train_b.is_empty() {
        return synthetic_dataset(train_a, n_synthetic);
    }
    let feats = normalize_features(&encode(encoder, &input_matrix(train_b))?);
    let points: Vec<&[f64]> = feats.row_iter().collect();
    let selection = select_reliable(&points, params, flags)?;
    let real = train_b
        .iter()
        .zip(&selection.pseudo_labels)
        .filter_map(|(s, l)| l.map(|l| (s.input.as_slice(), l)))
        .collect();
    EpochDataset::assemble(train_a, n_synthetic, real, selection.n_kept, Some(selection.report))
}

/// Uses the real domain's true identities, compacted to consecutive labels
/// in order of first appearance.
pub fn labeled_dataset(
    train_a: &[Sample],
    train_b: &[UnlabeledSample],
    b_identities: &[usize],
    n_synthetic: usize,
) -> Result<EpochDataset> {
    if b_identities.len() != train_b.len() {
        return Err(Error::dim(
            "labeled_dataset",
            format!("{} identities for {} samples", b_identities.len(), train_b.len()),
        ));
    }
    let mut remap = BTreeMap::new();
    let mut real = Vec::with_capacity(train_b.len());
    for (s, &id) in train_b.iter().zip(b_identities) {
        let next = remap.len();
        let l = *remap.entry(id).or_insert(next);
        real.push((s.input.as_slice(), l));
    }
    EpochDataset::assemble(train_a, n_synthetic, real, remap.len(), None)
}

/// Draws `P` distinct non-empty classes uniformly and `K` rows from each,
/// without replacement when the class is large enough. Returns row indices,
/// class by class.
pub fn pk_sample(dataset: &EpochDataset, p: usize, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = (0..dataset.n_classes)
        .filter(|&c| !dataset.by_class[c].is_empty())
        .collect();
    if eligible.is_empty() {
        return Err(Error::Argument("no class has any sample".into()));
    }
    let p_eff = if eligible.len() < p {
        warn!("only {} classes available, shrinking P from {p}", eligible.len());
        eligible.len()
    } else {
        p
    };
    let mut batch = Vec::with_capacity(p_eff * k);
    for ci in sample_indices(rng, eligible.len(), p_eff) {
        let rows = &dataset.by_class[eligible[ci]];
        if rows.len() >= k {
            batch.extend(sample_indices(rng, rows.len(), k).into_iter().map(|j| rows[j]));
        } else {
            batch.extend((0..k).map(|_| rows[rng.gen_range(0..rows.len())]));
        }
    }
    Ok(batch)
}

/// A concrete batch pulled out of an [`EpochDataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

impl Batch {
    pub fn gather(dataset: &EpochDataset, rows: &[usize]) -> Self {
        Self {
            inputs: dataset.inputs.select_rows(rows),
            labels: rows.iter().map(|&r| dataset.labels[r]).collect(),
            domains: rows.iter().map(|&r| dataset.domains[r]).collect(),
        }
    }

    pub fn is_single_domain(&self) -> bool {
        self.domains.windows(2).all(|w| w[0] == w[1])
    }
}

/// Loss values of one backbone step, before the update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BackboneStats {
    pub parts: LossParts,
    pub total: f64,
}

/// One Adam step on encoder and classifier with the discriminator frozen.
/// The balance term enters the objective with weight `lambda_m`; it is still
/// measured (for logging) when `lambda_m` is zero.
pub fn train_step_backbone(
    params: &mut ModelParams,
    opt: &mut AdamState,
    batch: &Batch,
    loss: &LossConfig,
    lambda_m: f64,
) -> Result<BackboneStats> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.inputs.clone());
    let f = params.encoder.forward_tape(&mut tape, x, true)?;
    let logits = params.head.forward_tape(&mut tape, f)?;
    let l_id = tape.cross_entropy(logits, &batch.labels)?;
    let tri_in = if loss.triplet_on_normalized {
        tape.row_normalize(f)
    } else {
        f
    };
    let l_tri = tape.triplet(tri_in, &batch.labels, loss.margin)?;

    let mut total = tape.scale(l_id, loss.lambda_s);
    total = tape.add(total, l_tri)?;
    let balance = if lambda_m != 0.0 {
        let d_logits = params.discriminator.forward_tape(&mut tape, f, false)?;
        let l_db = tape.domain_balance(d_logits, loss.balance_constant);
        let weighted = tape.scale(l_db, lambda_m);
        total = tape.add(total, weighted)?;
        tape.scalar(l_db)
    } else {
        let probs = discriminate(&params.discriminator, tape.value(f))?;
        domain_balance_loss(&probs, loss.balance_constant)
    };

    let stats = BackboneStats {
        parts: LossParts {
            balance,
            identity: tape.scalar(l_id),
            triplet: tape.scalar(l_tri),
        },
        total: tape.scalar(total),
    };
    if !stats.total.is_finite() {
        return Err(Error::Numeric {
            slot: "backbone loss".into(),
        });
    }
    let grads = tape.backward(total, 1.0)?;
    let mut slots = params.encoder.slots_mut();
    slots.extend(params.head.slots_mut());
    opt.step(&mut slots, &grads)?;
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorStats {
    pub loss: f64,
    /// Fraction of rows whose domain was predicted correctly, before the update.
    pub accuracy: f64,
}

/// One Adam step on the discriminator with encoder and classifier frozen.
/// A single-domain batch is skipped and yields `None`.
pub fn train_step_discriminator(
    params: &mut ModelParams,
    opt: &mut AdamState,
    batch: &Batch,
) -> Result<Option<DiscriminatorStats>> {
    if batch.is_single_domain() {
        debug!("skipping discriminator step on a single-domain batch");
        return Ok(None);
    }
    let feats = encode(&params.encoder, &batch.inputs)?;
    let mut tape = Tape::new();
    let f = tape.constant(feats);
    let logits = params.discriminator.forward_tape(&mut tape, f, true)?;
    let l_d = tape.domain_cross_entropy(logits, &batch.domains)?;
    let loss = tape.scalar(l_d);
    if !loss.is_finite() {
        return Err(Error::Numeric {
            slot: "discriminator loss".into(),
        });
    }
    let correct = tape
        .value(logits)
        .row_iter()
        .zip(&batch.domains)
        .filter(|(row, &d)| argmax(row) == d)
        .count();
    let grads = tape.backward(l_d, 1.0)?;
    opt.step(&mut params.discriminator.slots_mut(), &grads)?;
    Ok(Some(DiscriminatorStats {
        loss,
        accuracy: correct as f64 / batch.labels.len() as f64,
    }))
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Per-epoch summary, one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "M_prime")]
    pub m_prime: usize,
    pub n_pseudo: usize,
    pub loss_db: f64,
    pub loss_d: f64,
    pub loss_id: f64,
    pub loss_tri: f64,
    pub disc_acc: f64,
    pub lr: f64,
    #[serde(rename = "map_C")]
    pub map_c: f64,
    #[serde(rename = "rank1_C")]
    pub rank1_c: f64,
}

pub fn write_epoch_csv(logs: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    write_epoch_csv_tagged(logs, path, None)
}

/// Like [`write_epoch_csv`], with an optional leading `# comment` line.
pub fn write_epoch_csv_tagged(logs: &[EpochLog], path: impl AsRef<Path>, comment: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    if let Some(c) = comment {
        writeln!(file, "# {c}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(file);
    for log in logs {
        w.serialize(log)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_epoch_csv(path: impl AsRef<Path>) -> Result<Vec<EpochLog>> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Backbone,
    Discriminator,
    /// A discriminator turn whose batch held a single domain.
    SkippedDiscriminator,
}

/// Parameter fingerprints around one batch, for auditing the alternation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepRecord {
    pub epoch: usize,
    pub iter: usize,
    pub warmup: bool,
    pub kind: StepKind,
    pub backbone_before: u64,
    pub backbone_after: u64,
    pub discriminator_before: u64,
    pub discriminator_after: u64,
}

impl StepRecord {
    pub fn backbone_changed(&self) -> bool {
        self.backbone_before != self.backbone_after
    }

    pub fn discriminator_changed(&self) -> bool {
        self.discriminator_before != self.discriminator_after
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub params: ModelParams,
    pub logs: Vec<EpochLog>,
    /// Target-domain evaluation per evaluated epoch, in epoch order.
    pub reports: Vec<(usize, EvalReport)>,
    pub cluster_reports: Vec<ClusterReport>,
    /// Identity loss of every backbone step, per epoch.
    pub identity_loss_trace: Vec<Vec<f64>>,
}

impl RunOutput {
    pub fn final_report(&self) -> Option<&EvalReport> {
        self.reports.last().map(|(_, r)| r)
    }
}

pub fn run(cfg: &TrainConfig, bench: &Benchmark) -> Result<RunOutput> {
    Trainer::new(cfg.clone(), bench)?.run(None)
}

/// Hooks into a training run. A plain `FnMut(&StepRecord)` observes steps only.
pub trait RunObserver {
    /// After every batch, with parameter fingerprints taken around it.
    fn step(&mut self, _record: &StepRecord) {}

    /// Right after the classifier has been set up for `epoch`'s dataset.
    fn classifier_ready(&mut self, _epoch: usize, _dataset: &EpochDataset, _params: &ModelParams) {}
}

impl<F: FnMut(&StepRecord)> RunObserver for F {
    fn step(&mut self, record: &StepRecord) {
        self(record)
    }
}

/// Like [`run`], reporting to `observer` as training proceeds.
pub fn run_observed(cfg: &TrainConfig, bench: &Benchmark, observer: &mut dyn RunObserver) -> Result<RunOutput> {
    Trainer::new(cfg.clone(), bench)?.run(Some(observer))
}

fn backbone_fingerprint(p: &ModelParams) -> u64 {
    crate::model::fingerprint(p.encoder.slots().into_iter().chain(p.head.slots()))
}

/// Owns one training run's state.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    bench: &'a Benchmark,
    seeds: SeedTree,
    n_synthetic: usize,
    params: ModelParams,
    opt_backbone: AdamState,
    opt_disc: AdamState,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, bench: &'a Benchmark) -> Result<Self> {
        cfg.validate()?;
        if bench.train_a.is_empty() {
            return Err(Error::Config("benchmark has no synthetic training samples".into()));
        }
        if cfg.real_data == RealData::Labeled && bench.reveal_b_identities().is_none() {
            return Err(Error::Config(
                "labeled real data requested but the benchmark carries no identities for B".into(),
            ));
        }
        let seeds = SeedTree::new(cfg.seed).child("train");
        let mut init = seeds.rng("init");
        let encoder = Mlp::random("enc", &cfg.model.encoder_dims(bench.d_in()), &mut init);
        let discriminator = Mlp::random("disc", &cfg.model.discriminator_dims(), &mut init);
        let n_synthetic = bench.n_synthetic();
        let head = ClassifierHead::random(cfg.model.d_feat, n_synthetic, 0, &mut init);
        let adam = cfg.adam();
        Ok(Self {
            bench,
            seeds,
            n_synthetic,
            params: ModelParams {
                encoder,
                head,
                discriminator,
            },
            opt_backbone: AdamState::new(adam),
            opt_disc: AdamState::new(adam),
            cfg,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    fn train_b(&self) -> &'a [UnlabeledSample] {
        match self.cfg.real_data {
            RealData::None => &[],
            _ => &self.bench.train_b,
        }
    }

    pub fn epoch_dataset(&self) -> Result<EpochDataset> {
        let a = &self.bench.train_a;
        match self.cfg.real_data {
            RealData::None => synthetic_dataset(a, self.n_synthetic),
            RealData::Unlabeled => build_epoch_dataset(
                &self.params.encoder,
                a,
                self.train_b(),
                self.n_synthetic,
                &self.cfg.cluster,
                self.cfg.criteria,
            ),
            RealData::Labeled => labeled_dataset(
                a,
                self.train_b(),
                self.bench.reveal_b_identities().expect("checked in new"),
                self.n_synthetic,
            ),
        }
    }

    /// Sets up the classifier for `dataset` and resets its optimizer moments.
    pub fn init_classifier(&mut self, epoch: usize, dataset: &EpochDataset) -> Result<()> {
        let d = self.cfg.model.d_feat;
        let head = match self.cfg.classifier_init {
            ClassifierInit::Random => {
                let mut rng = self.seeds.child("head").index(epoch as u64).rng("random");
                self.opt_backbone.reset_slot(W1_SLOT);
                ClassifierHead::random(d, self.n_synthetic, dataset.n_pseudo_classes(), &mut rng)
            }
            ClassifierInit::Adaptive => {
                let clusters = (0..dataset.n_pseudo_classes())
                    .map(|i| encode(&self.params.encoder, &dataset.inputs.select_rows(dataset.pseudo_class_rows(i))))
                    .collect::<Result<Vec<_>>>()?;
                if epoch == 0 {
                    let a = &self.bench.train_a;
                    let feats = encode(&self.params.encoder, &input_matrix(a))?;
                    let labels: Vec<usize> = a.iter().map(|s| s.identity.expect("checked")).collect();
                    adaptive_init(
                        W1Source::ClassMeans {
                            features: &feats,
                            labels: &labels,
                            n_classes: self.n_synthetic,
                        },
                        &clusters,
                    )?
                } else {
                    adaptive_init(W1Source::Carry(&self.params.head), &clusters)?
                }
            }
        };
        self.opt_backbone.reset_slot(W2_SLOT);
        self.params.head = head;
        Ok(())
    }

    pub fn run(mut self, mut observer: Option<&mut dyn RunObserver>) -> Result<RunOutput> {
        let cfg = self.cfg.clone();
        let mut logs = Vec::with_capacity(cfg.total_epochs);
        let mut reports = Vec::new();
        let mut cluster_reports = Vec::new();
        let mut identity_loss_trace = Vec::with_capacity(cfg.total_epochs);

        for epoch in 0..cfg.total_epochs {
            let lr = cfg.lr_at(epoch);
            self.opt_backbone.set_lr(lr);
            self.opt_disc.set_lr(lr);
            let warmup = epoch < cfg.warmup_epochs;
            let lambda_m = if warmup { 0.0 } else { cfg.loss.lambda_m };

            let dataset = self.epoch_dataset()?;
            if let Some(mut rep) = dataset.cluster_report.clone() {
                rep.epoch = Some(epoch);
                cluster_reports.push(rep);
            }
            self.init_classifier(epoch, &dataset)?;
            if let Some(obs) = observer.as_mut() {
                obs.classifier_ready(epoch, &dataset, &self.params);
            }
            let mut rng = self.seeds.child("epoch").index(epoch as u64).rng("pk");

            let mut sums = LossParts::default();
            let mut n_backbone = 0usize;
            let (mut d_loss, mut d_acc, mut n_disc, mut n_skipped) = (0.0, 0.0, 0usize, 0usize);
            let mut id_trace = Vec::new();
            for iter in 0..cfg.iters_per_epoch {
                let rows = pk_sample(&dataset, cfg.p, cfg.k, &mut rng)?;
                let batch = Batch::gather(&dataset, &rows);
                let before = observer
                    .as_ref()
                    .map(|_| (backbone_fingerprint(&self.params), self.params.discriminator.fingerprint()));
                let kind = if !warmup && iter % cfg.disc_period == 0 {
                    match train_step_discriminator(&mut self.params, &mut self.opt_disc, &batch)? {
                        Some(s) => {
                            d_loss += s.loss;
                            d_acc += s.accuracy;
                            n_disc += 1;
                            StepKind::Discriminator
                        }
                        None => {
                            n_skipped += 1;
                            StepKind::SkippedDiscriminator
                        }
                    }
                } else {
                    let s = train_step_backbone(
                        &mut self.params,
                        &mut self.opt_backbone,
                        &batch,
                        &cfg.loss,
                        lambda_m,
                    )?;
                    sums.balance += s.parts.balance;
                    sums.identity += s.parts.identity;
                    sums.triplet += s.parts.triplet;
                    id_trace.push(s.parts.identity);
                    n_backbone += 1;
                    StepKind::Backbone
                };
                if let (Some(obs), Some((bb, db))) = (observer.as_mut(), before) {
                    obs.step(&StepRecord {
                        epoch,
                        iter,
                        warmup,
                        kind,
                        backbone_before: bb,
                        backbone_after: backbone_fingerprint(&self.params),
                        discriminator_before: db,
                        discriminator_after: self.params.discriminator.fingerprint(),
                    });
                }
            }
            if n_skipped > 0 {
                debug!("epoch {epoch}: skipped {n_skipped} single-domain discriminator batches");
            }

            let last = epoch + 1 == cfg.total_epochs;
            let (map_c, rank1_c) = if (cfg.eval_every_epoch || last) && !self.bench.query_c.is_empty() {
                let r = evaluate(&self.params.encoder, &self.bench.query_c, &self.bench.gallery_c)?;
                let out = (r.map, r.rank1());
                reports.push((epoch, r));
                out
            } else {
                (0.0, 0.0)
            };
            let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
            let log = EpochLog {
                epoch,
                m_prime: dataset.n_pseudo_classes(),
                n_pseudo: dataset.n_pseudo_samples(),
                loss_db: mean(sums.balance, n_backbone),
                loss_d: mean(d_loss, n_disc),
                loss_id: mean(sums.identity, n_backbone),
                loss_tri: mean(sums.triplet, n_backbone),
                disc_acc: mean(d_acc, n_disc),
                lr,
                map_c,
                rank1_c,
            };
            info!(
                "epoch {epoch}: M'={} L_id={:.4} L_tri={:.4} L_db={:.4} mAP={:.4}",
                log.m_prime, log.loss_id, log.loss_tri, log.loss_db, log.map_c
            );
            if !self.params.encoder.is_finite() || !self.params.discriminator.is_finite() {
                return Err(Error::Numeric {
                    slot: format!("parameters after epoch {epoch}"),
                });
            }
            logs.push(log);
            identity_loss_trace.push(id_trace);
        }
        Ok(RunOutput {
            params: self.params,
            logs,
            reports,
            cluster_reports,
            identity_loss_trace,
        })
    }
}
