//! Forward and backward rules for the layers the model uses.

use crate::error::{Error, Result};
use crate::numkit::{DenseMatrix, ParamTensor};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Negative slope [`LEAKY_SLOPE`].
    LeakyRelu,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `y = x·w + b` with `b` a `1 x out` row broadcast over rows.
pub fn affine(x: &DenseMatrix, w: &ParamTensor, b: &ParamTensor) -> Result<DenseMatrix> {
    if b.value.rows() != 1 || b.value.cols() != w.value.cols() {
        return Err(Error::Shape(format!(
            "bias {:?} for weight {:?}",
            b.shape(),
            w.shape()
        )));
    }
    let mut y = x.matmul(&w.value)?;
    let bias = b.value.row(0);
    for r in 0..y.rows() {
        for (v, bb) in y.row_mut(r).iter_mut().zip(bias) {
            *v += bb;
        }
    }
    Ok(y)
}

/// Accumulates `xᵀ·g` into `w.grad` and the column sums of `g` into `b.grad`;
/// returns `g·wᵀ`.
pub fn affine_backward(
    x: &DenseMatrix,
    w: &mut ParamTensor,
    b: &mut ParamTensor,
    g: &DenseMatrix,
) -> Result<DenseMatrix> {
    if g.cols() != w.value.cols() || g.rows() != x.rows() {
        return Err(Error::Shape(format!(
            "affine backward grad {:?} for x {:?} and w {:?}",
            g.shape(),
            x.shape(),
            w.shape()
        )));
    }
    DenseMatrix::accumulate_t_matmul(&mut w.grad, x, g)?;
    for (acc, s) in b.grad.row_mut(0).iter_mut().zip(g.column_sums()) {
        *acc += s;
    }
    g.matmul_t(&w.value)
}

pub fn activation(x: &DenseMatrix, kind: Activation) -> DenseMatrix {
    let mut y = x.clone();
    for v in y.values_mut() {
        *v = match kind {
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(*v),
            Activation::LeakyRelu => {
                if *v > 0.0 {
                    *v
                } else {
                    LEAKY_SLOPE * *v
                }
            }
        };
    }
    y
}

/// Gradient with respect to the pre-activation input `x`.
pub fn activation_backward(x: &DenseMatrix, g: &DenseMatrix, kind: Activation) -> Result<DenseMatrix> {
    if x.shape() != g.shape() {
        return Err(Error::Shape("activation backward".into()));
    }
    let mut out = g.clone();
    for (o, &xv) in out.values_mut().iter_mut().zip(x.values()) {
        let d = match kind {
            Activation::Relu => {
                if xv > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(xv);
                s * (1.0 - s)
            }
            Activation::LeakyRelu => {
                if xv > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        };
        *o *= d;
    }
    Ok(out)
}

fn check_labels(logits: &[f64], labels: &[f64]) -> Result<()> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logits and {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Contract("empty batch in loss".into()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Contract(format!("label {bad} not in {{0,1}}")));
    }
    Ok(())
}

/// Mean binary cross-entropy on logits, in the overflow-free form.
pub fn bce_with_logits(logits: &[f64], labels: &[f64]) -> Result<f64> {
    check_labels(logits, labels)?;
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(total / logits.len() as f64)
}

/// `(sigmoid(z) - y) / n` per entry.
pub fn bce_with_logits_backward(logits: &[f64], labels: &[f64]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    let n = logits.len() as f64;
    Ok(logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| (sigmoid(z) - y) / n)
        .collect())
}
