//! Training objectives.
//!
//! Each loss returns its mean value over the batch together with the exact
//! gradient with respect to its direct input (logits or feature rows). The
//! [`Tape`](crate::diffcore::Tape) heads wrap these kernels, and which
//! parameters the gradient finally reaches is decided by what the caller
//! registers as a parameter versus a constant on that tape.
//!
//! The domain losses come in two forms: a probability-level form that mirrors
//! the textbook definition, and a fused logit-level form used for training.
//! The fused forms work with `log_softmax` so they stay finite even when a
//! probability underflows to zero.

use serde::{Deserialize, Serialize};

use crate::diffcore::{l2_dist, log_softmax_row, softmax_in_place, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the domain balance loss.
    pub lambda_m: f64,
    /// Weight of the identity loss.
    pub lambda_s: f64,
    /// Triplet margin.
    pub margin: f64,
    /// Per-coordinate constant of the domain balance loss.
    pub balance_constant: f64,
    pub n_domains: usize,
    /// Apply the triplet loss to L2-normalized features instead of raw ones.
    pub triplet_on_normalized: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_m: 1.0,
            lambda_s: 1.0,
            margin: 0.3,
            balance_constant: min_balance_constant(2),
            n_domains: 2,
            triplet_on_normalized: false,
        }
    }
}

/// Smallest constant keeping the balance loss nonnegative: `ln(n) / n`.
pub fn min_balance_constant(n_domains: usize) -> f64 {
    (n_domains as f64).ln() / n_domains as f64
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_domains != 2 {
            return Err(Error::Config(format!(
                "n_domains must be 2, got {}",
                self.n_domains
            )));
        }
        let floor = min_balance_constant(self.n_domains);
        // tolerate the rounding of a hand-written ln(2)/2
        if self.balance_constant < floor - 1e-12 {
            return Err(Error::Config(format!(
                "balance_constant {} is below ln(n)/n = {floor}",
                self.balance_constant
            )));
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(self.lambda_m >= 0.0 && self.lambda_s >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Mean domain cross-entropy `-(1/B) Σ ln p[i, d_i]` on probability rows.
pub fn domain_classification_loss(probs: &Matrix, domains: &[usize]) -> Result<f64> {
    check_domains(probs, domains)?;
    check_prob_rows(probs)?;
    let b = probs.rows() as f64;
    Ok(domains
        .iter()
        .enumerate()
        .map(|(i, &d)| -probs[(i, d)].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / b)
}

/// Domain cross-entropy on discriminator logits, with the gradient w.r.t. the logits.
pub fn domain_classification_from_logits(logits: &Matrix, domains: &[usize]) -> Result<LossGrad> {
    check_domains(logits, domains)?;
    identity_loss(logits, domains)
}

/// Domain balance loss `(1/B) Σ_i Σ_j (p_ij ln p_ij + a)` on probability rows,
/// with `0 ln 0 = 0`.
pub fn domain_balance_loss(probs: &Matrix, a: f64) -> f64 {
    if probs.rows() == 0 {
        return 0.0;
    }
    let total: f64 = probs
        .row_iter()
        .map(|r| r.iter().map(|&p| xlogx(p) + a).sum::<f64>())
        .sum();
    total / probs.rows() as f64
}

/// Domain balance loss evaluated on logits, with the gradient w.r.t. the logits.
///
/// For `p = softmax(z)` the row gradient is `p_k (ln p_k - Σ_j p_j ln p_j) / B`.
pub fn domain_balance_from_logits(logits: &Matrix, a: f64) -> LossGrad {
    let (b, n) = logits.shape();
    let mut grad = Matrix::zeros(b, n);
    if b == 0 {
        return LossGrad { value: 0.0, grad };
    }
    let mut total = 0.0;
    for i in 0..b {
        let logp = log_softmax_row(logits.row(i));
        let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let neg_h: f64 = p.iter().zip(&logp).map(|(pk, lk)| pk * lk).sum();
        total += neg_h + a * n as f64;
        for ((gk, pk), lk) in grad.row_mut(i).iter_mut().zip(&p).zip(&logp) {
            *gk = pk * (lk - neg_h) / b as f64;
        }
    }
    LossGrad {
        value: total / b as f64,
        grad,
    }
}

/// Mean softmax cross-entropy over all classes, gradient w.r.t. the logits.
pub fn identity_loss(logits: &Matrix, labels: &[usize]) -> Result<LossGrad> {
    let (b, m) = logits.shape();
    if labels.len() != b {
        return Err(Error::dim(
            "identity_loss",
            format!("{} labels for {b} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= m) {
        return Err(Error::Argument(format!(
            "label {bad} out of range for {m} classes"
        )));
    }
    let mut grad = Matrix::zeros(b, m);
    if b == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        total -= log_softmax_row(row)[y];
        let g = grad.row_mut(i);
        g.copy_from_slice(row);
        softmax_in_place(g);
        g[y] -= 1.0;
        for v in g.iter_mut() {
            *v /= b as f64;
        }
    }
    Ok(LossGrad {
        value: total / b as f64,
        grad,
    })
}

/// Batch-hard triplet loss.
///
/// For every anchor the positive is the same-label row at maximum L2 distance
/// and the negative is the different-label row at minimum L2 distance, ties
/// going to the lowest row index. Inactive hinges contribute no gradient, and
/// a zero distance contributes a zero subgradient.
pub fn triplet_loss(features: &Matrix, labels: &[usize], margin: f64) -> Result<LossGrad> {
    let (b, d) = features.shape();
    if labels.len() != b {
        return Err(Error::dim(
            "triplet_loss",
            format!("{} labels for {b} rows", labels.len()),
        ));
    }
    let mut grad = Matrix::zeros(b, d);
    if b == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let mut dist = vec![0.0; b * b];
    for i in 0..b {
        for j in (i + 1)..b {
            let v = l2_dist(features.row(i), features.row(j));
            dist[i * b + j] = v;
            dist[j * b + i] = v;
        }
    }

    let mut total = 0.0;
    let scale = 1.0 / b as f64;
    for i in 0..b {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..b {
            if j == i {
                continue;
            }
            let dij = dist[i * b + j];
            if labels[j] == labels[i] {
                if pos.is_none_or(|p| dij > dist[i * b + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|n| dij < dist[i * b + n]) {
                neg = Some(j);
            }
        }
        let (Some(p), Some(n)) = (pos, neg) else {
            return Err(Error::Contract(format!(
                "triplet anchor {i} (label {}) has no {} in the batch",
                labels[i],
                if pos.is_none() { "positive" } else { "negative" }
            )));
        };
        let d_ap = dist[i * b + p];
        let d_an = dist[i * b + n];
        let hinge = margin + d_ap - d_an;
        if hinge > 0.0 {
            total += hinge;
            if d_ap > 0.0 {
                add_unit_diff(&mut grad, features, i, p, scale / d_ap);
            }
            if d_an > 0.0 {
                add_unit_diff(&mut grad, features, i, n, -scale / d_an);
            }
        }
    }
    Ok(LossGrad {
        value: total * scale,
        grad,
    })
}

/// grad[i] += c (f_i - f_j); grad[j] -= c (f_i - f_j)
fn add_unit_diff(grad: &mut Matrix, f: &Matrix, i: usize, j: usize, c: f64) {
    let diff: Vec<f64> = f.row(i).iter().zip(f.row(j)).map(|(a, b)| a - b).collect();
    for (g, dv) in grad.row_mut(i).iter_mut().zip(&diff) {
        *g += c * dv;
    }
    for (g, dv) in grad.row_mut(j).iter_mut().zip(&diff) {
        *g -= c * dv;
    }
}

/// The three parts of the backbone objective, as scalar values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub balance: f64,
    pub identity: f64,
    pub triplet: f64,
}

/// `λm · L_db + λs · L_id + L_tri`.
pub fn combined_loss(parts: &LossParts, cfg: &LossConfig) -> f64 {
    cfg.lambda_m * parts.balance + cfg.lambda_s * parts.identity + parts.triplet
}

/// Mean `KL(p_i || uniform)` over probability rows.
pub fn kl_to_uniform(probs: &Matrix) -> f64 {
    if probs.rows() == 0 {
        return 0.0;
    }
    let n = probs.cols() as f64;
    probs
        .row_iter()
        .map(|r| r.iter().map(|&p| xlogx(p) + p * n.ln()).sum::<f64>())
        .sum::<f64>()
        / probs.rows() as f64
}

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

fn check_domains(m: &Matrix, domains: &[usize]) -> Result<()> {
    if m.cols() != 2 {
        return Err(Error::dim(
            "domain loss",
            format!("expected 2 domain columns, got {}", m.cols()),
        ));
    }
    if domains.len() != m.rows() {
        return Err(Error::dim(
            "domain loss",
            format!("{} domain labels for {} rows", domains.len(), m.rows()),
        ));
    }
    if let Some(&bad) = domains.iter().find(|&&d| d > 1) {
        return Err(Error::Argument(format!("domain label {bad} is not 0 or 1")));
    }
    Ok(())
}

fn check_prob_rows(probs: &Matrix) -> Result<()> {
    for (i, r) in probs.row_iter().enumerate() {
        let s: f64 = r.iter().sum();
        if (s - 1.0).abs() > 1e-9 || r.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Argument(format!(
                "row {i} is not a probability vector (sum {s})"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn domain_classification_examples() {
        let uniform = m(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!((domain_classification_loss(&uniform, &[0, 1]).unwrap() - LN2).abs() < 1e-15);
        let perfect = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(domain_classification_loss(&perfect, &[0, 1]).unwrap(), 0.0);
        let v = domain_classification_loss(&m(&[&[0.9, 0.1]]), &[0]).unwrap();
        assert!((v - 0.1054).abs() < 1e-4);
        assert!((v + 0.9f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn domain_classification_rejects_bad_labels() {
        let p = m(&[&[0.5, 0.5]]);
        assert!(matches!(
            domain_classification_loss(&p, &[2]),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            domain_classification_from_logits(&p, &[3]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn logit_and_probability_forms_agree() {
        let z = m(&[&[0.3, -1.2], &[2.0, 0.5]]);
        let p = crate::diffcore::softmax(&z);
        let a = domain_classification_loss(&p, &[1, 0]).unwrap();
        let b = domain_classification_from_logits(&z, &[1, 0]).unwrap().value;
        assert!((a - b).abs() < 1e-14);
        let a = domain_balance_loss(&p, LN2 / 2.0);
        let b = domain_balance_from_logits(&z, LN2 / 2.0).value;
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn domain_balance_examples() {
        let a = LN2 / 2.0;
        assert!(domain_balance_loss(&m(&[&[0.5, 0.5]]), a).abs() < 1e-15);
        assert!((domain_balance_loss(&m(&[&[1.0, 0.0]]), a) - LN2).abs() < 1e-15);
        let v = domain_balance_loss(&m(&[&[0.9, 0.1]]), a);
        assert!((v - 0.3681).abs() < 1e-4);
    }

    #[test]
    fn domain_balance_from_saturated_logits_is_finite() {
        let z = m(&[&[1e6, -1e6], &[-1e6, 1e6]]);
        let lg = domain_balance_from_logits(&z, LN2 / 2.0);
        assert!((lg.value - LN2).abs() < 1e-12);
        assert!(lg.grad.is_finite());
    }

    #[test]
    fn identity_examples() {
        let v = identity_loss(&m(&[&[0.0, 0.0]]), &[1]).unwrap().value;
        assert!((v - LN2).abs() < 1e-15);
        let v = identity_loss(&m(&[&[1e3, 0.0]]), &[0]).unwrap().value;
        assert!(v.abs() < 1e-300);
        let v = identity_loss(&m(&[&[1.0, 0.0]]), &[0]).unwrap().value;
        assert!((v - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
        assert!((v - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn identity_rejects_out_of_range_label() {
        assert!(matches!(
            identity_loss(&m(&[&[0.0, 0.0]]), &[2]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn triplet_examples() {
        // anchor 0: d_ap = 1.0, d_an = 0.5 -> 0.8
        // anchor 1: d_ap = 1.0, d_an = 1.5 -> 0
        // anchor 2: d_ap = 10.5, d_an = 0.5 -> 10.3
        // anchor 3: d_ap = 10.5, d_an = 9.0 -> 1.8
        let f = m(&[&[0.0], &[1.0], &[-0.5], &[10.0]]);
        let lg = triplet_loss(&f, &[0, 0, 1, 1], 0.3).unwrap();
        let expected = (0.8 + 0.0 + 10.3 + 1.8) / 4.0;
        assert!((lg.value - expected).abs() < 1e-12);
    }

    #[test]
    fn triplet_satisfied_margin_is_zero() {
        // anchor 0: d_ap 0.5, d_an 1.0; every other anchor is slack as well
        let f = m(&[&[0.0], &[0.5], &[-1.0], &[-1.4]]);
        let lg = triplet_loss(&f, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(lg.value, 0.0);
        assert!(lg.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn triplet_degenerate_geometry_gives_margin() {
        let f = Matrix::filled(4, 3, 0.7);
        let lg = triplet_loss(&f, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((lg.value - 0.3).abs() < 1e-15);
        assert!(lg.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn triplet_without_positive_violates_contract() {
        let f = m(&[&[0.0], &[1.0], &[2.0]]);
        assert!(matches!(
            triplet_loss(&f, &[0, 1, 1], 0.3),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            triplet_loss(&f, &[0, 0, 0], 0.3),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn combined_examples() {
        let cfg = LossConfig::default();
        let parts = LossParts {
            balance: 0.2,
            identity: 0.3,
            triplet: 0.4,
        };
        assert!((combined_loss(&parts, &cfg) - 0.9).abs() < 1e-15);
        let no_db = LossConfig {
            lambda_m: 0.0,
            ..cfg
        };
        assert!((combined_loss(&parts, &no_db) - 0.7).abs() < 1e-15);
        assert_eq!(combined_loss(&LossParts::default(), &cfg), 0.0);
    }

    #[test]
    fn config_rejects_small_balance_constant() {
        let cfg = LossConfig {
            balance_constant: 0.3,
            ..LossConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(LossConfig::default().validate().is_ok());
    }

    #[test]
    fn kl_to_uniform_endpoints() {
        assert_eq!(kl_to_uniform(&m(&[&[0.5, 0.5]])), 0.0);
        assert!((kl_to_uniform(&m(&[&[1.0, 0.0]])) - LN2).abs() < 1e-15);
    }
}
