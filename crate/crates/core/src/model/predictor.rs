//! Two-layer MLP scoring of `[left ‖ right]` pairs.
//!
//! The first layer is linear in the concatenation, so `[l ‖ r]·W1` is
//! computed as `l·W1_top + r·W1_bottom`, projecting each node once rather
//! than once per pair.

use crate::error::{Error, Result};
use crate::numkit::{DenseMatrix, ParamTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: ParamTensor,
    pub b1: ParamTensor,
    pub w2: ParamTensor,
    pub b2: ParamTensor,
}

impl Mlp {
    pub fn input_width(&self) -> usize {
        self.w1.value.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.value.cols()
    }

    fn check(&self, left: &DenseMatrix, right: &DenseMatrix) -> Result<()> {
        if left.cols() + right.cols() != self.input_width() {
            return Err(Error::Shape(format!(
                "predictor expects width {}, got {} + {}",
                self.input_width(),
                left.cols(),
                right.cols()
            )));
        }
        Ok(())
    }

    /// Row projections through the two halves of the first layer, bias folded
    /// into the left half.
    fn project(&self, left: &DenseMatrix, right: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        self.check(left, right)?;
        let split = left.cols();
        let top = self.w1.value.row_slice(0, split);
        let bottom = self.w1.value.row_slice(split, self.input_width());
        let mut lp = left.matmul(&top)?;
        let bias = self.b1.value.row(0);
        for r in 0..lp.rows() {
            for (v, b) in lp.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok((lp, right.matmul(&bottom)?))
    }

    pub fn scorer(&self, left: &DenseMatrix, right: &DenseMatrix) -> Result<PairScorer> {
        let (left_proj, right_proj) = self.project(left, right)?;
        Ok(PairScorer {
            left_proj,
            right_proj,
            w2: self.w2.value.values().to_vec(),
            b2: self.b2.value.get(0, 0),
        })
    }
}

const LANES: usize = 8;

/// `Σ_k relu(a_k + b_k) w_k`, accumulated in independent lanes so the loop
/// vectorizes.
#[inline]
fn relu_dot(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let (ca, cb, cw) = (a.chunks_exact(LANES), b.chunks_exact(LANES), w.chunks_exact(LANES));
    let (ra, rb, rw) = (ca.remainder(), cb.remainder(), cw.remainder());
    for ((x, y), z) in ca.zip(cb).zip(cw) {
        for j in 0..LANES {
            let h = x[j] + y[j];
            acc[j] += if h > 0.0 { h } else { 0.0 } * z[j];
        }
    }
    let mut s = 0.0;
    for ((x, y), z) in ra.iter().zip(rb).zip(rw) {
        let h = x + y;
        s += if h > 0.0 { h } else { 0.0 } * z;
    }
    acc.iter().sum::<f64>() + s
}

/// Scores arbitrary (left row, right row) pairs against fixed embeddings.
pub struct PairScorer {
    left_proj: DenseMatrix,
    right_proj: DenseMatrix,
    w2: Vec<f64>,
    b2: f64,
}

impl PairScorer {
    #[inline]
    pub fn score(&self, left: usize, right: usize) -> f64 {
        self.b2 + relu_dot(self.left_proj.row(left), self.right_proj.row(right), &self.w2)
    }

    /// Scores of `left` against every right row.
    pub fn score_all(&self, left: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.right_proj.rows()).map(|r| self.score(left, r)));
    }
}

pub(crate) struct PredictorCache {
    left_proj: DenseMatrix,
    right_proj: DenseMatrix,
    /// Hidden pre-activations, one row per pair.
    pre: DenseMatrix,
}

/// Logits `W2ᵀ relu(W1ᵀ [l ‖ r] + b1) + b2` for each pair of row positions.
pub(crate) fn predict_forward(
    mlp: &Mlp,
    left: &DenseMatrix,
    right: &DenseMatrix,
    left_pos: &[usize],
    right_pos: &[usize],
) -> Result<(Vec<f64>, PredictorCache)> {
    let (left_proj, right_proj) = mlp.project(left, right)?;
    let hidden = mlp.hidden();
    let w2 = mlp.w2.value.values();
    let b2 = mlp.b2.value.get(0, 0);
    let mut pre = DenseMatrix::zeros(left_pos.len(), hidden);
    let mut logits = Vec::with_capacity(left_pos.len());
    for (p, (&l, &r)) in left_pos.iter().zip(right_pos).enumerate() {
        let (a, b) = (left_proj.row(l), right_proj.row(r));
        for (h, (x, y)) in pre.row_mut(p).iter_mut().zip(a.iter().zip(b)) {
            *h = x + y;
        }
        logits.push(b2 + relu_dot(a, b, w2));
    }
    Ok((
        logits,
        PredictorCache {
            left_proj,
            right_proj,
            pre,
        },
    ))
}

/// Accumulates MLP gradients; returns gradients for the left and right rows.
pub(crate) fn predict_backward(
    mlp: &mut Mlp,
    left: &DenseMatrix,
    right: &DenseMatrix,
    left_pos: &[usize],
    right_pos: &[usize],
    cache: PredictorCache,
    grad_logits: &[f64],
) -> Result<(DenseMatrix, DenseMatrix)> {
    let hidden = mlp.hidden();
    let mut g_left_proj = DenseMatrix::zeros(cache.left_proj.rows(), hidden);
    let mut g_right_proj = DenseMatrix::zeros(cache.right_proj.rows(), hidden);
    let w2 = mlp.w2.value.values().to_vec();
    let mut g_w2 = vec![0.0; hidden];
    let mut g_b1 = vec![0.0; hidden];
    let mut g_b2 = 0.0;
    let mut g_pre = vec![0.0; hidden];
    for (p, (&l, &r)) in left_pos.iter().zip(right_pos).enumerate() {
        let gl = grad_logits[p];
        g_b2 += gl;
        for (k, &h) in cache.pre.row(p).iter().enumerate() {
            if h > 0.0 {
                g_w2[k] += gl * h;
                g_pre[k] = gl * w2[k];
            } else {
                g_pre[k] = 0.0;
            }
        }
        for (k, g) in g_pre.iter().enumerate() {
            g_b1[k] += g;
        }
        for (a, g) in g_left_proj.row_mut(l).iter_mut().zip(&g_pre) {
            *a += g;
        }
        for (a, g) in g_right_proj.row_mut(r).iter_mut().zip(&g_pre) {
            *a += g;
        }
    }
    for (a, g) in mlp.w2.grad.values_mut().iter_mut().zip(&g_w2) {
        *a += g;
    }
    *mlp.b2.grad.values_mut().first_mut().unwrap() += g_b2;
    for (a, g) in mlp.b1.grad.values_mut().iter_mut().zip(&g_b1) {
        *a += g;
    }

    let split = left.cols();
    let g_top = left.t_matmul(&g_left_proj)?;
    let g_bottom = right.t_matmul(&g_right_proj)?;
    let w1g = mlp.w1.grad.values_mut();
    for (a, g) in w1g[..split * hidden].iter_mut().zip(g_top.values()) {
        *a += g;
    }
    for (a, g) in w1g[split * hidden..].iter_mut().zip(g_bottom.values()) {
        *a += g;
    }
    let top = mlp.w1.value.row_slice(0, split);
    let bottom = mlp.w1.value.row_slice(split, mlp.input_width());
    Ok((g_left_proj.matmul_t(&top)?, g_right_proj.matmul_t(&bottom)?))
}
