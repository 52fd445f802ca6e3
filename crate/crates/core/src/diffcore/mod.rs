//! Dense numerics with exact reverse-mode gradients.
//!
//! Only what the training loop needs: affine layers, ReLU, row softmax,
//! column concatenation, scaling/addition of scalars and the fused loss heads
//! from [`crate::losses`]. Everything is `f64`.

mod adam;
mod matrix;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use matrix::{dot, l2_dist, sq_dist, Matrix};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// `x · W + b`, with `b` broadcast over rows.
pub fn affine_forward(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(Error::dim(
            "affine_forward",
            format!("bias {:?} for weight {:?}", b.shape(), w.shape()),
        ));
    }
    let mut y = x.matmul(w)?;
    let bias = b.row(0);
    for i in 0..y.rows() {
        for (v, bj) in y.row_mut(i).iter_mut().zip(bias) {
            *v += bj;
        }
    }
    Ok(y)
}

pub fn relu_forward(x: &Matrix) -> Matrix {
    x.map(|v| if v <= 0.0 { 0.0 } else { v })
}

/// Row-wise softmax with max subtraction.
pub fn softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row-wise `log softmax`, finite for finite input.
pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn affine_examples() {
        let eye = Matrix::identity(2);
        let y = affine_forward(&m(&[&[1.0, 2.0]]), &eye, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(y, m(&[&[1.0, 2.0]]));

        let w = m(&[&[2.0, 0.0], &[0.0, 3.0]]);
        let y = affine_forward(&m(&[&[1.0, 1.0]]), &w, &m(&[&[1.0, 1.0]])).unwrap();
        assert_eq!(y, m(&[&[3.0, 4.0]]));

        let w = m(&[&[0.3, -7.0], &[11.0, 2.5]]);
        let y = affine_forward(&m(&[&[0.0, 0.0]]), &w, &m(&[&[5.0, -5.0]])).unwrap();
        assert_eq!(y, m(&[&[5.0, -5.0]]));
    }

    #[test]
    fn affine_rejects_mismatched_shapes() {
        let x = Matrix::zeros(1, 3);
        let w = Matrix::zeros(2, 2);
        assert!(matches!(
            affine_forward(&x, &w, &Matrix::zeros(1, 2)),
            Err(Error::Dimension { .. })
        ));
        let x = Matrix::zeros(1, 2);
        assert!(matches!(
            affine_forward(&x, &w, &Matrix::zeros(1, 3)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu_forward(&m(&[&[-1.0, 2.0]])), m(&[&[0.0, 2.0]]));
        assert_eq!(relu_forward(&m(&[&[0.0]])), m(&[&[0.0]]));
        assert_eq!(
            relu_forward(&m(&[&[3.5, -0.5, 0.25]])),
            m(&[&[3.5, 0.0, 0.25]])
        );
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&m(&[&[0.0, 0.0]])), m(&[&[0.5, 0.5]]));
        assert_eq!(softmax(&m(&[&[1000.0, 1000.0]])), m(&[&[0.5, 0.5]]));
        let p = softmax(&m(&[&[3f64.ln(), 0.0]]));
        assert!((p[(0, 0)] - 0.75).abs() < 1e-15);
        assert!((p[(0, 1)] - 0.25).abs() < 1e-15);
    }
}
