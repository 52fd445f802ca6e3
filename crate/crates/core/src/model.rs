//! Encoder, block-partitioned identity classifier and domain discriminator.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{affine_forward, relu_forward, softmax, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Fully connected network with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    prefix: String,
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
    names: Vec<(String, String)>,
}

impl Mlp {
    pub fn zeros(prefix: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least an input and an output width");
        let weights = dims.windows(2).map(|w| Matrix::zeros(w[0], w[1])).collect();
        let biases = dims.windows(2).map(|w| Matrix::zeros(1, w[1])).collect();
        let names = (0..dims.len() - 1)
            .map(|l| (format!("{prefix}.{l}.w"), format!("{prefix}.{l}.b")))
            .collect();
        Self {
            prefix: prefix.to_string(),
            weights,
            biases,
            names,
        }
    }

    /// He-uniform weights (`U(-√(6/fan_in), √(6/fan_in))`), zero biases.
    pub fn random(prefix: &str, dims: &[usize], rng: &mut Rng) -> Self {
        let mut m = Self::zeros(prefix, dims);
        for w in &mut m.weights {
            let bound = (6.0 / w.rows() as f64).sqrt();
            for v in w.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        m
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.weights[0].rows()];
        d.extend(self.weights.iter().map(Matrix::cols));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("non-empty").cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let last = self.weights.len() - 1;
        let mut h = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = affine_forward(&h, w, b)?;
            if l < last {
                h = relu_forward(&h);
            }
        }
        Ok(h)
    }

    /// Records the forward pass; weights are parameters iff `trainable`.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<Var> {
        let last = self.weights.len() - 1;
        let mut h = x;
        for (l, ((w, b), (wn, bn))) in self
            .weights
            .iter()
            .zip(&self.biases)
            .zip(&self.names)
            .enumerate()
        {
            let (wv, bv) = if trainable {
                (tape.param(wn, w), tape.param(bn, b))
            } else {
                (tape.constant(w.clone()), tape.constant(b.clone()))
            };
            h = tape.affine(h, wv, bv)?;
            if l < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn slots_mut(&mut self) -> Vec<(&str, &mut Matrix)> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for ((w, b), (wn, bn)) in self
            .weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .zip(&self.names)
        {
            out.push((wn.as_str(), w));
            out.push((bn.as_str(), b));
        }
        out
    }

    pub fn slots(&self) -> Vec<(&str, &Matrix)> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for ((w, b), (wn, bn)) in self.weights.iter().zip(&self.biases).zip(&self.names) {
            out.push((wn.as_str(), w));
            out.push((bn.as_str(), b));
        }
        out
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn is_finite(&self) -> bool {
        self.slots().iter().all(|(_, m)| m.is_finite())
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint(self.slots())
    }
}

/// Feature encoder `D_in -> h -> h -> d_feat`.
pub type EncoderParams = Mlp;

/// Domain discriminator `d_feat -> h_d -> h_d -> 2`.
pub type DiscriminatorParams = Mlp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub d_feat: usize,
    pub disc_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            d_feat: 32,
            disc_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn encoder_dims(&self, d_in: usize) -> Vec<usize> {
        vec![d_in, self.hidden, self.hidden, self.d_feat]
    }

    pub fn discriminator_dims(&self) -> Vec<usize> {
        vec![self.d_feat, self.disc_hidden, self.disc_hidden, 2]
    }
}

/// Raw (unnormalized) features.
pub fn encode(params: &EncoderParams, x: &Matrix) -> Result<Matrix> {
    if x.cols() != params.input_dim() {
        return Err(Error::dim(
            "encode",
            format!("input width {} for encoder input {}", x.cols(), params.input_dim()),
        ));
    }
    params.forward(x)
}

/// Scales every row to unit L2 norm; zero rows stay zero.
pub fn normalize_features(f: &Matrix) -> Matrix {
    let mut out = f.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            for v in row.iter_mut() {
                *v /= n;
            }
        }
    }
    out
}

/// Softmax domain probabilities.
pub fn discriminate(params: &DiscriminatorParams, f: &Matrix) -> Result<Matrix> {
    Ok(softmax(&params.forward(f)?))
}

/// Identity classifier `y = fᵀ (W1 | W2)` with the bias fixed at zero.
/// `W1` holds the synthetic classes and keeps its width; `W2` holds the
/// current epoch's pseudo classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub w1: Matrix,
    pub w2: Matrix,
}

pub const W1_SLOT: &str = "head.w1";
pub const W2_SLOT: &str = "head.w2";

/// Where the synthetic block comes from in [`adaptive_init`].
pub enum W1Source<'a> {
    /// Carry over the previous epoch's final block.
    Carry(&'a ClassifierHead),
    /// First epoch: per-class means of normalized synthetic features.
    ClassMeans {
        features: &'a Matrix,
        labels: &'a [usize],
        n_classes: usize,
    },
}

impl ClassifierHead {
    pub fn d_feat(&self) -> usize {
        self.w1.rows()
    }

    pub fn n_synthetic(&self) -> usize {
        self.w1.cols()
    }

    pub fn n_pseudo(&self) -> usize {
        self.w2.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.w1.cols() + self.w2.cols()
    }

    /// Uniform `±1/√d` entries in both blocks.
    pub fn random(d_feat: usize, n_synthetic: usize, n_pseudo: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d_feat as f64).sqrt();
        let mut draw = |cols| {
            let data = (0..d_feat * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            Matrix::from_vec(d_feat, cols, data).expect("sized")
        };
        let w1 = draw(n_synthetic);
        let w2 = draw(n_pseudo);
        Self { w1, w2 }
    }

    pub fn weight(&self) -> Matrix {
        self.w1.hconcat(&self.w2).expect("blocks share d_feat")
    }

    pub fn forward_tape(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        let w1 = tape.param(W1_SLOT, &self.w1);
        let w2 = tape.param(W2_SLOT, &self.w2);
        let w = tape.hconcat(w1, w2)?;
        tape.matmul(f, w)
    }

    pub fn slots_mut(&mut self) -> Vec<(&str, &mut Matrix)> {
        vec![(W1_SLOT, &mut self.w1), (W2_SLOT, &mut self.w2)]
    }

    pub fn slots(&self) -> Vec<(&str, &Matrix)> {
        vec![(W1_SLOT, &self.w1), (W2_SLOT, &self.w2)]
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint(self.slots())
    }
}

/// Logits over all `N + M'` classes; columns `0..N` are synthetic.
pub fn classify_identity(head: &ClassifierHead, f: &Matrix) -> Result<Matrix> {
    if head.n_classes() == 0 {
        return Err(Error::Argument("classifier has no classes".into()));
    }
    if f.cols() != head.d_feat() {
        return Err(Error::dim(
            "classify_identity",
            format!("feature width {} for head width {}", f.cols(), head.d_feat()),
        ));
    }
    f.matmul(&head.weight())
}

/// Builds the classifier for a new epoch: `W1` from `w1`, and column `i` of
/// `W2` the mean of the L2-normalized features of pseudo class `i`.
pub fn adaptive_init(w1: W1Source<'_>, cluster_features: &[Matrix]) -> Result<ClassifierHead> {
    let w1 = match w1 {
        W1Source::Carry(prev) => prev.w1.clone(),
        W1Source::ClassMeans {
            features,
            labels,
            n_classes,
        } => class_means(&normalize_features(features), labels, n_classes)?,
    };
    let d = w1.rows();
    let mut w2 = Matrix::zeros(d, cluster_features.len());
    for (i, feats) in cluster_features.iter().enumerate() {
        if feats.rows() == 0 {
            return Err(Error::State(format!("pseudo class {i} has no members")));
        }
        if feats.cols() != d {
            return Err(Error::dim(
                "adaptive_init",
                format!("cluster {i} features have width {}, head has {d}", feats.cols()),
            ));
        }
        let mean = normalize_features(feats).sum_rows().scale(1.0 / feats.rows() as f64);
        for (r, v) in mean.row(0).iter().enumerate() {
            w2[(r, i)] = *v;
        }
    }
    Ok(ClassifierHead { w1, w2 })
}

/// `d x n_classes` matrix whose column `c` is the mean row of class `c`
/// (zero for a class without rows).
pub fn class_means(features: &Matrix, labels: &[usize], n_classes: usize) -> Result<Matrix> {
    if labels.len() != features.rows() {
        return Err(Error::dim(
            "class_means",
            format!("{} labels for {} rows", labels.len(), features.rows()),
        ));
    }
    let d = features.cols();
    let mut sums = Matrix::zeros(d, n_classes);
    let mut counts = vec![0usize; n_classes];
    for (row, &y) in features.row_iter().zip(labels) {
        if y >= n_classes {
            return Err(Error::Argument(format!("label {y} >= {n_classes}")));
        }
        counts[y] += 1;
        for (r, v) in row.iter().enumerate() {
            sums[(r, y)] += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            for r in 0..d {
                sums[(r, c)] /= n as f64;
            }
        }
    }
    Ok(sums)
}

/// Everything one training run optimizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub head: ClassifierHead,
    pub discriminator: DiscriminatorParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder: Vec<usize>,
    pub discriminator: Vec<usize>,
    pub n_synthetic: usize,
    pub n_pseudo: usize,
}

impl ModelParams {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            encoder: self.encoder.dims(),
            discriminator: self.discriminator.dims(),
            n_synthetic: self.head.n_synthetic(),
            n_pseudo: self.head.n_pseudo(),
        }
    }

    pub fn zeros(arch: &Architecture) -> Result<Self> {
        if arch.encoder.len() < 2 || arch.discriminator.len() < 2 {
            return Err(Error::Checkpoint("architecture needs at least one layer".into()));
        }
        let d_feat = *arch.encoder.last().expect("checked");
        if arch.discriminator[0] != d_feat {
            return Err(Error::Checkpoint(format!(
                "discriminator input {} does not match feature width {d_feat}",
                arch.discriminator[0]
            )));
        }
        Ok(Self {
            encoder: Mlp::zeros("enc", &arch.encoder),
            head: ClassifierHead {
                w1: Matrix::zeros(d_feat, arch.n_synthetic),
                w2: Matrix::zeros(d_feat, arch.n_pseudo),
            },
            discriminator: Mlp::zeros("disc", &arch.discriminator),
        })
    }

    fn slots(&self) -> Vec<(&str, &Matrix)> {
        let mut s = self.encoder.slots();
        s.extend(self.head.slots());
        s.extend(self.discriminator.slots());
        s
    }

    fn slots_mut(&mut self) -> Vec<(&str, &mut Matrix)> {
        let mut s = self.encoder.slots_mut();
        s.extend(self.head.slots_mut());
        s.extend(self.discriminator.slots_mut());
        s
    }

    pub fn checkpoint(&self, epoch: usize, config_hash: &str) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.to_string(),
                epoch,
                config_hash: config_hash.to_string(),
                architecture: self.architecture(),
                slots: self
                    .slots()
                    .into_iter()
                    .map(|(n, m)| SlotShape {
                        name: n.to_string(),
                        rows: m.rows(),
                        cols: m.cols(),
                    })
                    .collect(),
            },
            values: self.slots().into_iter().map(|(_, m)| m.clone()).collect(),
        }
    }

    /// Overwrites every parameter from `ckpt`; any name or shape mismatch
    /// rejects the checkpoint and leaves `self` untouched.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let expected: Vec<(String, (usize, usize))> = self
            .slots()
            .into_iter()
            .map(|(n, m)| (n.to_string(), m.shape()))
            .collect();
        if expected.len() != ckpt.values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter slots, checkpoint has {}",
                expected.len(),
                ckpt.values.len()
            )));
        }
        for ((name, shape), (slot, value)) in expected.iter().zip(ckpt.header.slots.iter().zip(&ckpt.values)) {
            if *name != slot.name || *shape != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "slot `{}` {:?} does not match model slot `{name}` {shape:?}",
                    slot.name,
                    value.shape()
                )));
            }
        }
        for ((_, p), v) in self.slots_mut().into_iter().zip(&ckpt.values) {
            *p = v.clone();
        }
        Ok(())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Self::zeros(&ckpt.header.architecture)?;
        m.restore(ckpt)?;
        Ok(m)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DMXCKPT1";
const CHECKPOINT_FORMAT: &str = "domainmix-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub epoch: usize,
    pub config_hash: String,
    pub architecture: Architecture,
    pub slots: Vec<SlotShape>,
}

/// On disk: 8-byte magic, little-endian `u64` header length, JSON header,
/// then every slot's values as little-endian `f64` in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<Matrix>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for m in &self.values {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut bytes, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 8];
        read_exact(&mut bytes, &mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > bytes.len() {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..len])?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", header.format)));
        }
        bytes = &bytes[len..];
        let mut values = Vec::with_capacity(header.slots.len());
        for s in &header.slots {
            let mut data = Vec::with_capacity(s.rows * s.cols);
            let mut buf = [0u8; 8];
            for _ in 0..s.rows * s.cols {
                read_exact(&mut bytes, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            values.push(Matrix::from_vec(s.rows, s.cols, data)?);
        }
        if !bytes.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len())));
        }
        Ok(Self { header, values })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(src: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    src.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of checkpoint".into()))
}

/// Order-sensitive hash of parameter bit patterns.
pub fn fingerprint<'a>(slots: impl IntoIterator<Item = (&'a str, &'a Matrix)>) -> u64 {
    let mut h = DefaultHasher::new();
    for (name, m) in slots {
        name.hash(&mut h);
        m.shape().hash(&mut h);
        for v in m.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}
