use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::{dot, Matrix};

/// Softmax of `scores` in place, max-subtracted.
pub fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = libm::exp(*s - max);
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Multi-head causal self-attention.
///
/// `q`, `k`, `v` are `n × d` with heads laid out as consecutive `d / heads`
/// column blocks. Query `i` attends to keys `0..=i`, scaled by
/// `1/sqrt(d_head)`. Returns `Y = A·V` (`n × d`) and, per head, the
/// lower-triangular probability matrix `A` (`n × n`, zero above the diagonal).
pub fn causal_attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> (Matrix, Vec<Matrix>) {
    let n = q.rows();
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut y = Matrix::zeros(n, d);
    let mut probs = Vec::with_capacity(heads);
    let mut row = vec![0.0; n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let scores = &mut row[..=i];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(qi, &k.row(j)[cols.clone()]) * scale;
            }
            softmax_in_place(scores);
            let yi = &mut y.row_mut(i)[cols.clone()];
            for (j, &p) in scores.iter().enumerate() {
                a.set(i, j, p);
                for (o, &vv) in yi.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += p * vv;
                }
            }
        }
        probs.push(a);
    }
    (y, probs)
}

/// Attention of a single new query against all cached keys (it is the last
/// position, so every key is visible). Writes `A·V` into `out`.
pub(crate) fn attend_last(q: &[f64], k: &Matrix, v: &Matrix, heads: usize, out: &mut [f64]) {
    let n = k.rows();
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut scores = vec![0.0; n];
    out.iter_mut().for_each(|o| *o = 0.0);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(&q[cols.clone()], &k.row(j)[cols.clone()]) * scale;
        }
        softmax_in_place(&mut scores);
        let oh = &mut out[cols.clone()];
        for (j, &p) in scores.iter().enumerate() {
            for (o, &vv) in oh.iter_mut().zip(&v.row(j)[cols.clone()]) {
                *o += p * vv;
            }
        }
    }
}
