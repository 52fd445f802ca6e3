//! Slow, obviously-correct reference implementations for tests.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng as _;

use crate::diffcore::{affine_forward, relu_forward, Matrix, Tape, Var};
use crate::error::Result;
use crate::model::Mlp;
use crate::rng::{Rng, SeedTree};

/// Density-reachability clustering straight from the definitions: core
/// points have at least `min_samples` points (themselves included) within
/// `eps`; clusters are connected components of the core graph, numbered by
/// their lowest-index core point; a border point takes the lowest-numbered
/// cluster among its core neighbors.
pub fn dbscan_oracle(points: &[Vec<f64>], eps: f64, min_samples: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let dist = |i: usize, j: usize| -> f64 {
        points[i]
            .iter()
            .zip(&points[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let near = |i: usize, j: usize| dist(i, j) <= eps;
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_samples)
        .collect();

    let mut comp = vec![None; n];
    let mut next = 0;
    for s in 0..n {
        if !core[s] || comp[s].is_some() {
            continue;
        }
        let mut queue = VecDeque::from([s]);
        comp[s] = Some(next);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                if core[v] && comp[v].is_none() && near(u, v) {
                    comp[v] = Some(next);
                    queue.push_back(v);
                }
            }
        }
        next += 1;
    }
    (0..n)
        .map(|i| {
            if core[i] {
                comp[i]
            } else {
                (0..n).filter(|&j| core[j] && near(i, j)).filter_map(|j| comp[j]).min()
            }
        })
        .collect()
}

/// Central finite differences of `f` with respect to every entry of `x`.
pub fn numeric_gradient(f: impl Fn(&Matrix) -> f64, x: &Matrix, h: f64) -> Matrix {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.data().len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let up = f(&probe);
        probe.data_mut()[k] = orig - h;
        let down = f(&probe);
        probe.data_mut()[k] = orig;
        g.data_mut()[k] = (up - down) / (2.0 * h);
    }
    g
}

/// `|a - b| / max(|a|, |b|, floor)`, maximized over entries.
pub fn max_relative_error(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Compares tape gradients of the scalar built by `build` against central
/// differences for every named parameter. `build` must register each entry
/// of `params` through [`Tape::param`] under its key. Returns the largest
/// relative error over all entries.
pub fn check_gradients(
    params: &BTreeMap<String, Matrix>,
    h: f64,
    floor: f64,
    build: impl Fn(&mut Tape, &BTreeMap<String, Matrix>) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let out = build(&mut tape, params)?;
    let grads = tape.backward(out, 1.0)?;
    let mut worst = 0.0f64;
    for (name, value) in params {
        let eval = |m: &Matrix| -> f64 {
            let mut p = params.clone();
            p.insert(name.clone(), m.clone());
            let mut t = Tape::new();
            let v = build(&mut t, &p).expect("forward succeeded once");
            t.scalar(v)
        };
        let numeric = numeric_gradient(eval, value, h);
        let analytic = grads
            .get(name)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(value.rows(), value.cols()));
        worst = worst.max(max_relative_error(&analytic, &numeric, floor));
    }
    Ok(worst)
}

type Builder = Box<dyn Fn(&mut Tape, &BTreeMap<String, Matrix>) -> Result<Var>>;

/// A scalar function of named parameters, for gradient checking.
pub struct GradCase {
    pub name: &'static str,
    pub params: BTreeMap<String, Matrix>,
    pub build: Builder,
}

impl GradCase {
    /// Largest relative error between tape and central-difference gradients.
    pub fn max_rel_error(&self, h: f64) -> Result<f64> {
        check_gradients(&self.params, h, 1e-3, &self.build)
    }
}

/// Names accepted by [`gradient_case`].
pub const GRADIENT_CASES: &[&str] = &[
    "affine",
    "relu",
    "softmax",
    "matmul",
    "hconcat",
    "scale_add",
    "row_normalize",
    "domain_ce",
    "domain_balance",
    "identity_ce",
    "triplet",
    "combined",
    "mlp",
    "classifier",
];

fn uniform(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Entries bounded away from zero, so ReLU kinks stay out of reach of the
/// finite-difference probe.
fn off_zero(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn pk_labels(rng: &mut Rng) -> Vec<usize> {
    let p = rng.gen_range(2..=3);
    let k = rng.gen_range(2..=3);
    (0..p).flat_map(|c| std::iter::repeat_n(c, k)).collect()
}

fn params(entries: Vec<(&str, Matrix)>) -> BTreeMap<String, Matrix> {
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Shorter distances make the norm's curvature large enough that central
/// differences themselves stop being accurate to the checked tolerance.
const MIN_PAIR_DISTANCE: f64 = 0.1;

/// True when hardest-positive/negative choices and the hinge are all
/// separated by more than `gap`, so the triplet loss is smooth nearby.
pub fn triplet_is_smooth(features: &Matrix, labels: &[usize], margin: f64, gap: f64) -> bool {
    let n = features.rows();
    let d = |i: usize, j: usize| crate::diffcore::l2_dist(features.row(i), features.row(j));
    for a in 0..n {
        let mut pos: Vec<f64> = (0..n).filter(|&j| j != a && labels[j] == labels[a]).map(|j| d(a, j)).collect();
        let mut neg: Vec<f64> = (0..n).filter(|&j| labels[j] != labels[a]).map(|j| d(a, j)).collect();
        pos.sort_by(|x, y| y.total_cmp(x));
        neg.sort_by(f64::total_cmp);
        if pos.is_empty() || neg.is_empty() || pos.iter().chain(&neg).any(|&v| v < MIN_PAIR_DISTANCE) {
            return false;
        }
        if pos.len() > 1 && pos[0] - pos[1] < gap {
            return false;
        }
        if neg.len() > 1 && neg[1] - neg[0] < gap {
            return false;
        }
        if (pos[0] - neg[0] + margin).abs() < gap {
            return false;
        }
    }
    true
}

fn mlp_is_smooth(x: &Matrix, layers: &[(Matrix, Matrix)], gap: f64) -> bool {
    let mut h = x.clone();
    for (l, (w, b)) in layers.iter().enumerate() {
        h = affine_forward(&h, w, b).expect("shapes");
        if l + 1 < layers.len() {
            if h.data().iter().any(|v| v.abs() < gap) {
                return false;
            }
            h = relu_forward(&h);
        }
    }
    true
}

fn mlp_layers(rng: &mut Rng, dims: &[usize]) -> Vec<(Matrix, Matrix)> {
    dims.windows(2)
        .map(|w| (uniform(rng, w[0], w[1], 1.0), uniform(rng, 1, w[1], 0.5)))
        .collect()
}

fn mlp_from(prefix: &str, dims: &[usize], p: &BTreeMap<String, Matrix>) -> Mlp {
    let mut m = Mlp::zeros(prefix, dims);
    for (name, slot) in m.slots_mut() {
        *slot = p[name].clone();
    }
    m
}

fn layer_entries(prefix: &str, layers: Vec<(Matrix, Matrix)>) -> Vec<(String, Matrix)> {
    layers
        .into_iter()
        .enumerate()
        .flat_map(|(l, (w, b))| [(format!("{prefix}.{l}.w"), w), (format!("{prefix}.{l}.b"), b)])
        .collect()
}

/// A random instance of the named gradient-check case. Instances landing
/// near a non-differentiable point are redrawn.
pub fn gradient_case(name: &str, seed: u64) -> GradCase {
    let tree = SeedTree::new(seed).child("gradient-case");
    let mut rng = tree.rng(name);
    let mut dim = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (b, i, o) = (dim(2, 5), dim(1, 4), dim(1, 4));
    let mut rng = tree.child("values").rng(name);
    let name: &'static str = GRADIENT_CASES
        .iter()
        .copied()
        .find(|c| *c == name)
        .unwrap_or_else(|| panic!("unknown gradient case {name}"));
    match name {
        "affine" => {
            let r = uniform(&mut rng, b, o, 1.0);
            GradCase {
                name,
                params: params(vec![
                    ("x", uniform(&mut rng, b, i, 1.0)),
                    ("w", uniform(&mut rng, i, o, 1.0)),
                    ("b", uniform(&mut rng, 1, o, 1.0)),
                ]),
                build: Box::new(move |t, p| {
                    let (x, w, bb) = (t.param("x", &p["x"]), t.param("w", &p["w"]), t.param("b", &p["b"]));
                    let y = t.affine(x, w, bb)?;
                    t.weighted_sum(y, &r)
                }),
            }
        }
        "relu" => {
            let r = uniform(&mut rng, b, i, 1.0);
            GradCase {
                name,
                params: params(vec![("x", off_zero(&mut rng, b, i))]),
                build: Box::new(move |t, p| {
                    let x = t.param("x", &p["x"]);
                    let y = t.relu(x);
                    t.weighted_sum(y, &r)
                }),
            }
        }
        "softmax" => {
            let c = o + 1;
            let r = uniform(&mut rng, b, c, 1.0);
            GradCase {
                name,
                params: params(vec![("x", uniform(&mut rng, b, c, 3.0))]),
                build: Box::new(move |t, p| {
                    let x = t.param("x", &p["x"]);
                    let y = t.softmax(x);
                    t.weighted_sum(y, &r)
                }),
            }
        }
        "matmul" => {
            let r = uniform(&mut rng, b, o, 1.0);
            GradCase {
                name,
                params: params(vec![("a", uniform(&mut rng, b, i, 1.0)), ("c", uniform(&mut rng, i, o, 1.0))]),
                build: Box::new(move |t, p| {
                    let (a, c) = (t.param("a", &p["a"]), t.param("c", &p["c"]));
                    let y = t.matmul(a, c)?;
                    t.weighted_sum(y, &r)
                }),
            }
        }
        "hconcat" => {
            let r = uniform(&mut rng, b, i + o, 1.0);
            GradCase {
                name,
                params: params(vec![("a", uniform(&mut rng, b, i, 1.0)), ("c", uniform(&mut rng, b, o, 1.0))]),
                build: Box::new(move |t, p| {
                    let (a, c) = (t.param("a", &p["a"]), t.param("c", &p["c"]));
                    let y = t.hconcat(a, c)?;
                    t.weighted_sum(y, &r)
                }),
            }
        }
        "scale_add" => {
            let r = uniform(&mut rng, b, i, 1.0);
            let k = rng.gen_range(-2.0..2.0);
            GradCase {
                name,
                params: params(vec![("a", uniform(&mut rng, b, i, 1.0)), ("c", uniform(&mut rng, b, i, 1.0))]),
                build: Box::new(move |t, p| {
                    let (a, c) = (t.param("a", &p["a"]), t.param("c", &p["c"]));
                    let s = t.scale(a, k);
                    let y = t.add(s, c)?;
                    t.weighted_sum(y, &r)
                }),
            }
        }
        "row_normalize" => {
            let d = i + 1;
            let r = uniform(&mut rng, b, d, 1.0);
            GradCase {
                name,
                params: params(vec![("x", off_zero(&mut rng, b, d))]),
                build: Box::new(move |t, p| {
                    let x = t.param("x", &p["x"]);
                    let y = t.row_normalize(x);
                    t.weighted_sum(y, &r)
                }),
            }
        }
        "domain_ce" => {
            let domains: Vec<usize> = (0..b).map(|_| rng.gen_range(0..2)).collect();
            GradCase {
                name,
                params: params(vec![("z", uniform(&mut rng, b, 2, 3.0))]),
                build: Box::new(move |t, p| {
                    let z = t.param("z", &p["z"]);
                    t.domain_cross_entropy(z, &domains)
                }),
            }
        }
        "domain_balance" => {
            let a = std::f64::consts::LN_2 / 2.0;
            GradCase {
                name,
                params: params(vec![("z", uniform(&mut rng, b, 2, 3.0))]),
                build: Box::new(move |t, p| {
                    let z = t.param("z", &p["z"]);
                    Ok(t.domain_balance(z, a))
                }),
            }
        }
        "identity_ce" => {
            let m = o + 1;
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..m)).collect();
            GradCase {
                name,
                params: params(vec![("z", uniform(&mut rng, b, m, 3.0))]),
                build: Box::new(move |t, p| {
                    let z = t.param("z", &p["z"]);
                    t.cross_entropy(z, &labels)
                }),
            }
        }
        "triplet" => {
            let labels = pk_labels(&mut rng);
            let margin = 0.3;
            let f = loop {
                let f = uniform(&mut rng, labels.len(), i + 1, 1.0);
                if triplet_is_smooth(&f, &labels, margin, 1e-3) {
                    break f;
                }
            };
            GradCase {
                name,
                params: params(vec![("f", f)]),
                build: Box::new(move |t, p| {
                    let f = t.param("f", &p["f"]);
                    t.triplet(f, &labels, margin)
                }),
            }
        }
        "combined" => combined_case(&mut rng, i + 1),
        "mlp" => {
            let dims = [i, o + 2, o + 1, 2];
            let (x, layers) = loop {
                let x = uniform(&mut rng, b, i, 1.0);
                let layers = mlp_layers(&mut rng, &dims);
                if mlp_is_smooth(&x, &layers, 1e-3) {
                    break (x, layers);
                }
            };
            let domains: Vec<usize> = (0..b).map(|_| rng.gen_range(0..2)).collect();
            GradCase {
                name,
                params: layer_entries("m", layers).into_iter().collect(),
                build: Box::new(move |t, p| {
                    let xv = t.constant(x.clone());
                    let z = mlp_from("m", &dims, p).forward_tape(t, xv, true)?;
                    t.domain_cross_entropy(z, &domains)
                }),
            }
        }
        "classifier" => {
            let (n_syn, n_pseudo) = (o, i);
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n_syn + n_pseudo)).collect();
            let d = i + 1;
            GradCase {
                name,
                params: params(vec![
                    ("f", uniform(&mut rng, b, d, 2.0)),
                    (crate::model::W1_SLOT, uniform(&mut rng, d, n_syn, 1.0)),
                    (crate::model::W2_SLOT, uniform(&mut rng, d, n_pseudo, 1.0)),
                ]),
                build: Box::new(move |t, p| {
                    let head = crate::model::ClassifierHead {
                        w1: p[crate::model::W1_SLOT].clone(),
                        w2: p[crate::model::W2_SLOT].clone(),
                    };
                    let f = t.param("f", &p["f"]);
                    let z = head.forward_tape(t, f)?;
                    t.cross_entropy(z, &labels)
                }),
            }
        }
        _ => unreachable!(),
    }
}

/// Encoder and classifier trained through identity, triplet and balance
/// terms with a frozen discriminator, weighted as in the backbone step.
fn combined_case(rng: &mut Rng, d_in: usize) -> GradCase {
    let labels = pk_labels(rng);
    let n = labels.len();
    let n_classes = labels.iter().max().expect("non-empty") + 1;
    let enc_dims = [d_in, 5, 3];
    let disc_dims = [3, 4, 2];
    let lambda_m = rng.gen_range(0.1..2.0);
    let lambda_s = rng.gen_range(0.1..2.0);
    let margin = 0.3;
    let a = std::f64::consts::LN_2 / 2.0;
    loop {
        let x = uniform(rng, n, d_in, 1.0);
        let enc = mlp_layers(rng, &enc_dims);
        let disc = mlp_layers(rng, &disc_dims);
        if !mlp_is_smooth(&x, &enc, 1e-3) {
            continue;
        }
        let mut f = x.clone();
        for (l, (w, b)) in enc.iter().enumerate() {
            f = affine_forward(&f, w, b).expect("shapes");
            if l + 1 < enc.len() {
                f = relu_forward(&f);
            }
        }
        if !mlp_is_smooth(&f, &disc, 1e-3) || !triplet_is_smooth(&f, &labels, margin, 1e-3) {
            continue;
        }
        let mut p: BTreeMap<String, Matrix> = layer_entries("enc", enc).into_iter().collect();
        p.insert(crate::model::W1_SLOT.into(), uniform(rng, 3, n_classes, 1.0));
        p.insert(crate::model::W2_SLOT.into(), uniform(rng, 3, 1, 1.0));
        let disc = mlp_from("disc", &disc_dims, &layer_entries("disc", disc).into_iter().collect());
        let labels = labels.clone();
        return GradCase {
            name: "combined",
            params: p,
            build: Box::new(move |t, p| {
                let xv = t.constant(x.clone());
                let f = mlp_from("enc", &enc_dims, p).forward_tape(t, xv, true)?;
                let head = crate::model::ClassifierHead {
                    w1: p[crate::model::W1_SLOT].clone(),
                    w2: p[crate::model::W2_SLOT].clone(),
                };
                let z = head.forward_tape(t, f)?;
                let l_id = t.cross_entropy(z, &labels)?;
                let l_tri = t.triplet(f, &labels, margin)?;
                let dz = disc.forward_tape(t, f, false)?;
                let l_db = t.domain_balance(dz, a);
                let s_db = t.scale(l_db, lambda_m);
                let s_id = t.scale(l_id, lambda_s);
                let sum = t.add(s_db, s_id)?;
                t.add(sum, l_tri)
            }),
        };
    }
}
