//! Simplified comparison methods.
//!
//! These follow the published descriptions of one-shot attention pruning and
//! average token merging closely enough to exercise the comparison harness;
//! they are not ports of the original code.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::selector::{compute_importance, SplitResult};
use crate::types::{AttentionRecord, TokenSequence};

/// Keeps the `keep_count` tokens with the highest head-averaged attention
/// from `record`, unchanged and in their original order. Ties prefer the
/// lower index.
pub fn fastv_prune(tokens: &TokenSequence, record: &AttentionRecord, keep_count: usize) -> Result<TokenSequence> {
    let n = tokens.len();
    if keep_count > n {
        return Err(Error::BadKeepCount { keep: keep_count, n });
    }
    if record.n_vis() != n {
        return Err(Error::DimensionMismatch { expected: n, actual: record.n_vis() });
    }
    let scores = compute_importance(core::slice::from_ref(record), 1)?.scores;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(keep_count);
    order.sort_unstable();
    Ok(tokens.gather(&order))
}

/// Assigns every removed token to its most cosine-similar kept token (lowest
/// index on ties) and replaces each kept token by the mean of itself and the
/// tokens assigned to it.
pub fn average_merge(tokens: &TokenSequence, split: &SplitResult) -> Result<TokenSequence> {
    Ok(tokens.with_data_of_kept(split, &merge_matrix(tokens, split)?))
}

/// Row-stochastic `kept × n` matrix with `output = M · tokens`.
pub fn merge_matrix(tokens: &TokenSequence, split: &SplitResult) -> Result<Matrix> {
    let n = tokens.len();
    if split.n() != n {
        return Err(Error::InvalidInput("split does not cover the token set"));
    }
    let kept = &split.kept_local_indices;
    if kept.is_empty() && !split.removed_local_indices.is_empty() {
        return Err(Error::InvalidInput("cannot merge into an empty kept set"));
    }
    let norms: Vec<f64> = (0..n).map(|i| libm::sqrt(dot(tokens.row(i), tokens.row(i)))).collect();
    let cosine = |a: usize, b: usize| {
        let denom = norms[a] * norms[b];
        if denom > 0.0 {
            dot(tokens.row(a), tokens.row(b)) / denom
        } else {
            0.0
        }
    };

    let mut members: Vec<Vec<usize>> = kept.iter().map(|&k| vec![k]).collect();
    for &r in &split.removed_local_indices {
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (slot, &k) in kept.iter().enumerate() {
            let s = cosine(r, k);
            if s > best_sim {
                best_sim = s;
                best = slot;
            }
        }
        members[best].push(r);
    }

    let mut m = Matrix::zeros(kept.len(), n);
    for (slot, group) in members.iter().enumerate() {
        let w = 1.0 / group.len() as f64;
        for &i in group {
            m.set(slot, i, w);
        }
    }
    Ok(m)
}

impl TokenSequence {
    fn with_data_of_kept(&self, split: &SplitResult, merge: &Matrix) -> Self {
        let d = self.dim();
        let mut out = Matrix::zeros(merge.rows(), d);
        for slot in 0..merge.rows() {
            let row = out.row_mut(slot);
            for (i, &w) in merge.row(slot).iter().enumerate() {
                if w != 0.0 {
                    for (o, &x) in row.iter_mut().zip(self.row(i)) {
                        *o += w * x;
                    }
                }
            }
        }
        let origin = split.kept_local_indices.iter().map(|&i| self.origin_indices()[i]).collect();
        TokenSequence::from_parts_unchecked(out, origin)
    }
}
