use std::collections::BTreeMap;

use super::{affine_forward, relu_forward, softmax, Matrix};
use crate::error::{Error, Result};
use crate::losses;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    Affine { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    Relu(Var),
    Softmax(Var),
    HConcat(Var, Var),
    Scale(Var, f64),
    Add(Var, Var),
    RowNormalize(Var),
    /// Scalar loss head; `grad` is d(loss)/d(input), computed during the forward pass.
    Head { input: Var, grad: Matrix },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by parameter slot name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    slots: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.slots.get(name)
    }

    pub fn insert(&mut self, name: &str, g: Matrix) {
        self.slots.insert(name.to_string(), g);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.slots.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Records a forward pass so that [`Tape::backward`] can replay it in reverse.
///
/// Parameters enter through [`Tape::param`] and receive gradients; anything
/// entered through [`Tape::constant`] is frozen for this pass. A fresh tape is
/// built for every optimizer step, so accumulators start at zero each time.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, name: &str, value: &Matrix) -> Var {
        self.push(value.clone(), Op::Param(name.to_string()), true)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = affine_forward(self.value(x), self.value(w), self.value(b))?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(y, Op::Affine { x, w, b }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::MatMul { a, b }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = relu_forward(self.value(x));
        let ng = self.needs(x);
        self.push(y, Op::Relu(x), ng)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = softmax(self.value(x));
        let ng = self.needs(x);
        self.push(y, Op::Softmax(x), ng)
    }

    pub fn hconcat(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).hconcat(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::HConcat(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).scale(c);
        let ng = self.needs(x);
        self.push(y, Op::Scale(x, c), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add(a, b), ng))
    }

    /// Scales each row to unit L2 norm; zero rows stay zero and pass no gradient.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let y = crate::model::normalize_features(self.value(x));
        let ng = self.needs(x);
        self.push(y, Op::RowNormalize(x), ng)
    }

    fn head(&mut self, input: Var, lg: losses::LossGrad) -> Var {
        let ng = self.needs(input);
        self.push(
            Matrix::scalar(lg.value),
            Op::Head {
                input,
                grad: lg.grad,
            },
            ng,
        )
    }

    /// `Σ x_ij r_ij` for a constant `r`; reduces any node to a scalar.
    pub fn weighted_sum(&mut self, x: Var, r: &Matrix) -> Result<Var> {
        let v = self.value(x);
        if v.shape() != r.shape() {
            return Err(Error::dim(
                "weighted_sum",
                format!("{:?} vs {:?}", v.shape(), r.shape()),
            ));
        }
        let value = v.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        Ok(self.head(
            x,
            losses::LossGrad {
                value,
                grad: r.clone(),
            },
        ))
    }

    /// Mean softmax cross-entropy of `logits` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lg = losses::identity_loss(self.value(logits), labels)?;
        Ok(self.head(logits, lg))
    }

    /// Domain classification loss on discriminator logits.
    pub fn domain_cross_entropy(&mut self, logits: Var, domains: &[usize]) -> Result<Var> {
        let lg = losses::domain_classification_from_logits(self.value(logits), domains)?;
        Ok(self.head(logits, lg))
    }

    /// Domain balance loss on discriminator logits.
    pub fn domain_balance(&mut self, logits: Var, a: f64) -> Var {
        let lg = losses::domain_balance_from_logits(self.value(logits), a);
        self.head(logits, lg)
    }

    /// Batch-hard triplet loss on feature rows.
    pub fn triplet(&mut self, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let lg = losses::triplet_loss(self.value(features), labels, margin)?;
        Ok(self.head(features, lg))
    }

    /// Reverse pass from the scalar node `loss`, seeded with `seed`.
    pub fn backward(&self, loss: Var, seed: f64) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward called before any forward pass was recorded".into(),
            ));
        }
        if self.nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }

        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(seed));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => match out.slots.get_mut(name) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        out.slots.insert(name.clone(), g);
                    }
                },
                Op::Affine { x, w, b } => {
                    if self.needs(*x) {
                        let dx = g.matmul_t(self.value(*w))?;
                        accumulate(&mut adj, *x, dx)?;
                    }
                    if self.needs(*w) {
                        let dw = self.value(*x).t_matmul(&g)?;
                        accumulate(&mut adj, *w, dw)?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, g.sum_rows())?;
                    }
                }
                Op::MatMul { a, b } => {
                    if self.needs(*a) {
                        let da = g.matmul_t(self.value(*b))?;
                        accumulate(&mut adj, *a, da)?;
                    }
                    if self.needs(*b) {
                        let db = self.value(*a).t_matmul(&g)?;
                        accumulate(&mut adj, *b, db)?;
                    }
                }
                Op::Relu(x) => {
                    let xin = self.value(*x);
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xin.data()) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut adj, *x, dx)?;
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - inner);
                        }
                    }
                    accumulate(&mut adj, *x, dx)?;
                }
                Op::HConcat(a, b) => {
                    let ca = self.value(*a).cols();
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g.col_slice(0, ca))?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, g.col_slice(ca, g.cols()))?;
                    }
                }
                Op::Scale(x, c) => accumulate(&mut adj, *x, g.scale(*c))?,
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, g)?;
                    }
                }
                Op::RowNormalize(x) => {
                    let xin = self.value(*x);
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let n = xin.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n == 0.0 {
                            continue;
                        }
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *d = (gv - yv * inner) / n;
                        }
                    }
                    accumulate(&mut adj, *x, dx)?;
                }
                Op::Head { input, grad } => {
                    let s = g[(0, 0)];
                    accumulate(&mut adj, *input, grad.scale(s))?;
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::scalar(1.0));
        let w = tape.param("w", &Matrix::scalar(0.37));
        let b = tape.constant(Matrix::zeros(1, 1));
        let y = tape.affine(x, w, b).unwrap();
        let g = tape.backward(y, 1.0).unwrap();
        assert_eq!(g.get("w").unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn dead_relu_passes_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param("w", &Matrix::scalar(-0.5));
        let r = tape.relu(w);
        let y = tape.scale(r, 3.0);
        let g = tape.backward(y, 1.0).unwrap();
        assert_eq!(g.get("w").unwrap()[(0, 0)], 0.0);

        // subgradient at exactly zero is zero as well
        let mut tape = Tape::new();
        let w = tape.param("w", &Matrix::scalar(0.0));
        let r = tape.relu(w);
        let g = tape.backward(r, 1.0).unwrap();
        assert_eq!(g.get("w").unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(0), 1.0), Err(Error::State(_))));
    }

    #[test]
    fn backward_on_non_scalar_is_a_state_error() {
        let mut tape = Tape::new();
        let w = tape.param("w", &Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(w, 1.0), Err(Error::State(_))));
    }

    #[test]
    fn constants_receive_no_gradient_slot() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[[1.0, 2.0]]).unwrap());
        let w = tape.constant(Matrix::identity(2));
        let b = tape.param("b", &Matrix::zeros(1, 2));
        let y = tape.affine(x, w, b).unwrap();
        let l = tape.cross_entropy(y, &[0]).unwrap();
        let g = tape.backward(l, 1.0).unwrap();
        assert_eq!(g.names().collect::<Vec<_>>(), vec!["b"]);
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut tape = Tape::new();
        let w = tape.param("w", &Matrix::scalar(2.0));
        let w2 = tape.param("w", &Matrix::scalar(2.0));
        let s = tape.add(w, w2).unwrap();
        let g = tape.backward(s, 1.5).unwrap();
        assert_eq!(g.get("w").unwrap()[(0, 0)], 3.0);
    }
}
